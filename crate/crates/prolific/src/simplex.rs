//! Small derivative-free Nelder-Mead minimizer.
//!
//! Used for the restricted-likelihood fits over variance ratios and for the
//! per-draw inner minimizations of the null sampler, so both paths share the
//! same optimizer behavior. Searches run in `ln(1 + ratio)` coordinates,
//! clamped below at zero, which makes boundary solutions (ratio = 0) exact.
//! The implementation avoids per-iteration allocation; the sampler calls it
//! millions of times.

/// Options for one multi-start Nelder-Mead run.
#[derive(Debug, Clone)]
pub struct SimplexOptions {
    /// Convergence is declared when the spread of objective values across the
    /// simplex falls below this.
    pub objective_tol: f64,
    /// Iteration cap per start.
    pub max_iter: usize,
    /// Initial step added to each coordinate when building the simplex.
    pub initial_step: f64,
    /// Starting points, one simplex run per entry.
    pub starts: Vec<Vec<f64>>,
    /// Upper clamp for coordinates (lower clamp is always 0).
    pub upper: f64,
}

impl SimplexOptions {
    /// Default multi-start setup: every coordinate starts at ratio 1e-2, 1
    /// and 1e2 in `ln(1+ratio)` coordinates.
    pub fn multi_start(dim: usize) -> Self {
        let starts = [1e-2f64, 1.0, 1e2]
            .iter()
            .map(|r| vec![r.ln_1p(); dim])
            .collect();
        SimplexOptions {
            objective_tol: 1e-7,
            max_iter: 200 * dim.max(1),
            initial_step: 0.8,
            starts,
            upper: 1e6f64.ln_1p(),
        }
    }
}

/// Outcome of a multi-start run.
#[derive(Debug, Clone)]
pub struct SimplexOutcome {
    pub point: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub evaluations: usize,
}

/// Scratch space reused across iterations and starts.
struct Workspace {
    /// `(dim + 1) x dim` simplex vertices, row-major.
    points: Vec<f64>,
    values: Vec<f64>,
    order: Vec<usize>,
    centroid: Vec<f64>,
    candidate: Vec<f64>,
    reflect: Vec<f64>,
}

/// Minimize `f` over the box `[0, upper]^dim` with multi-start Nelder-Mead.
///
/// The origin is always evaluated and kept as a candidate, so the reported
/// minimum is never worse than the all-zero point.
pub fn minimize<F: FnMut(&[f64]) -> f64>(mut f: F, opts: &SimplexOptions) -> SimplexOutcome {
    let dim = opts.starts.first().map_or(0, Vec::len);
    assert!(dim >= 1, "simplex search needs at least one coordinate");
    let m = dim + 1;

    let mut evaluations = 0usize;
    let mut eval = |x: &[f64], n: &mut usize| -> f64 {
        *n += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut ws = Workspace {
        points: vec![0.0; m * dim],
        values: vec![0.0; m],
        order: (0..m).collect(),
        centroid: vec![0.0; dim],
        candidate: vec![0.0; dim],
        reflect: vec![0.0; dim],
    };

    let origin = vec![0.0; dim];
    let mut best_point = origin.clone();
    let mut best_value = eval(&origin, &mut evaluations);
    let mut any_converged = false;
    let clamp = |x: f64| x.clamp(0.0, opts.upper);

    for start in &opts.starts {
        // Initial simplex around the start.
        for (slot, &s) in ws.points[..dim].iter_mut().zip(start.iter()) {
            *slot = clamp(s);
        }
        for v in 1..m {
            let row = v * dim;
            for i in 0..dim {
                ws.points[row + i] = ws.points[i];
            }
            let stepped = clamp(ws.points[row + v - 1] + opts.initial_step);
            ws.points[row + v - 1] = if (stepped - ws.points[v - 1]).abs() < 1e-12 {
                clamp(ws.points[v - 1] - opts.initial_step)
            } else {
                stepped
            };
        }
        for v in 0..m {
            ws.values[v] = eval(&ws.points[v * dim..v * dim + dim], &mut evaluations);
        }

        let mut converged = false;
        for _ in 0..opts.max_iter {
            ws.order.sort_by(|&a, &b| ws.values[a].total_cmp(&ws.values[b]));
            let best = ws.order[0];
            let second_worst = ws.order[m - 2];
            let worst = ws.order[m - 1];

            if ws.values[worst] - ws.values[best] < opts.objective_tol {
                converged = true;
                break;
            }

            // Centroid of all but the worst vertex.
            ws.centroid.iter_mut().for_each(|c| *c = 0.0);
            for &v in ws.order[..m - 1].iter() {
                for i in 0..dim {
                    ws.centroid[i] += ws.points[v * dim + i] / dim as f64;
                }
            }

            for i in 0..dim {
                ws.reflect[i] = clamp(2.0 * ws.centroid[i] - ws.points[worst * dim + i]);
            }
            let f_reflect = eval(&ws.reflect, &mut evaluations);

            if f_reflect < ws.values[best] {
                for i in 0..dim {
                    ws.candidate[i] = clamp(3.0 * ws.centroid[i] - 2.0 * ws.points[worst * dim + i]);
                }
                let f_expand = eval(&ws.candidate, &mut evaluations);
                if f_expand < f_reflect {
                    ws.points[worst * dim..worst * dim + dim].copy_from_slice(&ws.candidate);
                    ws.values[worst] = f_expand;
                } else {
                    ws.points[worst * dim..worst * dim + dim].copy_from_slice(&ws.reflect);
                    ws.values[worst] = f_reflect;
                }
            } else if f_reflect < ws.values[second_worst] {
                ws.points[worst * dim..worst * dim + dim].copy_from_slice(&ws.reflect);
                ws.values[worst] = f_reflect;
            } else {
                // Contract toward the centroid from the better of worst and
                // its reflection.
                let outside = f_reflect < ws.values[worst];
                for i in 0..dim {
                    let toward = if outside {
                        ws.reflect[i]
                    } else {
                        ws.points[worst * dim + i]
                    };
                    ws.candidate[i] = clamp(ws.centroid[i] + 0.5 * (toward - ws.centroid[i]));
                }
                let f_contract = eval(&ws.candidate, &mut evaluations);
                if f_contract < f_reflect.min(ws.values[worst]) {
                    ws.points[worst * dim..worst * dim + dim].copy_from_slice(&ws.candidate);
                    ws.values[worst] = f_contract;
                } else {
                    // Shrink everything toward the best vertex.
                    for &v in ws.order.iter() {
                        if v == best {
                            continue;
                        }
                        for i in 0..dim {
                            let b = ws.points[best * dim + i];
                            ws.points[v * dim + i] = clamp(b + 0.5 * (ws.points[v * dim + i] - b));
                        }
                        ws.values[v] = eval(&ws.points[v * dim..v * dim + dim], &mut evaluations);
                    }
                }
            }
        }

        any_converged |= converged;
        for v in 0..m {
            if ws.values[v] < best_value {
                best_value = ws.values[v];
                best_point.copy_from_slice(&ws.points[v * dim..v * dim + dim]);
            }
        }
    }

    SimplexOutcome {
        point: best_point,
        value: best_value,
        converged: any_converged,
        evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn finds_interior_quadratic_minimum() {
        let opts = SimplexOptions::multi_start(2);
        let out = minimize(
            |x| (x[0] - 1.3).powi(2) + 2.0 * (x[1] - 0.4).powi(2),
            &opts,
        );
        assert!(out.converged);
        assert_abs_diff_eq!(out.point[0], 1.3, epsilon = 1e-3);
        assert_abs_diff_eq!(out.point[1], 0.4, epsilon = 1e-3);
    }

    #[test]
    fn boundary_minimum_lands_exactly_at_zero() {
        let opts = SimplexOptions::multi_start(1);
        let out = minimize(|x| x[0] * x[0] + x[0], &opts);
        assert_eq!(out.point[0], 0.0);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn never_worse_than_origin() {
        let opts = SimplexOptions::multi_start(3);
        let out = minimize(|x| x.iter().sum::<f64>(), &opts);
        assert!(out.value <= 0.0 + 1e-15);
    }

    #[test]
    fn rosenbrock_like_valley_converges() {
        let opts = SimplexOptions::multi_start(2);
        let out = minimize(
            |x| {
                let a = x[0] - 1.0;
                let b = x[1] - x[0] * x[0];
                a * a + 20.0 * b * b
            },
            &opts,
        );
        assert!(out.converged);
        assert!(out.value < 1e-5, "value {}", out.value);
    }
}
