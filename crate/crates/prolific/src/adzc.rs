//! Adapted L2-norm competitor test for the projected treatment effect.
//!
//! The statistic is the integrated square of the penalized-spline estimate
//! of the treatment coefficient function. Its null distribution is
//! approximated either by a weighted chi-square mixture driven by the
//! sandwich covariance of the spline coefficients, or by a residual
//! bootstrap under the no-treatment refit.

use crate::basis::TruncatedPolyBasis;
use crate::error::{Error, Result};
use crate::gftest::VarianceRatios;
use crate::lmm::ProjectedLmmProblem;
use crate::quad::trapezoid_weights;
use crate::rng::{stream, StreamKind};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Null-distribution approximation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdZcMode {
    /// Weighted chi-square mixture from the coefficient sandwich covariance.
    ChiSqMixture,
    /// Residual bootstrap under the no-treatment refit.
    Bootstrap { b: usize },
}

/// Statistic and p-value of the competitor test on one direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdZcOutcome {
    pub statistic: f64,
    pub p: f64,
}

const EVAL_GRID: usize = 101;
const MIXTURE_DRAWS: usize = 100_000;

/// Column layout of the penalized design: fixed blocks first, then the
/// active random blocks with their ridge weights.
struct PenalizedDesign {
    a: DMatrix<f64>,
    /// Ridge penalty per column (0 for fixed columns).
    ridge: Vec<f64>,
    /// Columns of the treatment fixed part.
    tau_fixed: std::ops::Range<usize>,
    /// Columns of the treatment random part (empty when eta = 0).
    tau_random: std::ops::Range<usize>,
}

fn assemble(
    problem: &ProjectedLmmProblem,
    ratios: &VarianceRatios,
    drop_tau: bool,
) -> PenalizedDesign {
    let n = problem.n_rows();
    let mut blocks: Vec<(&DMatrix<f64>, f64, bool)> = vec![(&problem.x_b, 0.0, false)];
    if !drop_tau {
        blocks.push((&problem.x_tau, 0.0, true));
    }
    blocks.push((&problem.x_lambda, 0.0, false));
    if ratios.pi > 0.0 {
        blocks.push((&problem.z_mu, 1.0 / ratios.pi, false));
    }
    let mut tau_random = 0..0;
    if !drop_tau && ratios.eta > 0.0 {
        blocks.push((&problem.z_tau, 1.0 / ratios.eta, true));
    }
    if ratios.gamma > 0.0 {
        blocks.push((&problem.z_lambda, 1.0 / ratios.gamma, false));
    }

    let total: usize = blocks.iter().map(|(m, _, _)| m.ncols()).sum();
    let mut a = DMatrix::zeros(n, total);
    let mut ridge = Vec::with_capacity(total);
    let mut tau_fixed = 0..0;
    let mut offset = 0;
    for (m, pen, is_tau) in blocks {
        a.columns_mut(offset, m.ncols()).copy_from(m);
        ridge.extend(std::iter::repeat_n(pen, m.ncols()));
        if is_tau {
            if pen == 0.0 {
                tau_fixed = offset..offset + m.ncols();
            } else {
                tau_random = offset..offset + m.ncols();
            }
        }
        offset += m.ncols();
    }
    PenalizedDesign {
        a,
        ridge,
        tau_fixed,
        tau_random,
    }
}

/// Evaluation matrix of the treatment function on the day grid, mapping the
/// design's treatment coefficients to function values.
fn tau_grid_map(problem: &ProjectedLmmProblem, design: &PenalizedDesign, grid: &[f64]) -> DMatrix<f64> {
    let basis = TruncatedPolyBasis::new(problem.degrees.tau, problem.knots.clone())
        .expect("design knots are valid");
    let ncols = design.tau_fixed.len() + design.tau_random.len();
    let mut t = DMatrix::zeros(grid.len(), ncols);
    for (g, &d) in grid.iter().enumerate() {
        let (fixed, random) = basis.row(d, true);
        for (c, v) in fixed.iter().enumerate() {
            t[(g, c)] = *v;
        }
        if !design.tau_random.is_empty() {
            for (c, v) in random.iter().enumerate() {
                t[(g, design.tau_fixed.len() + c)] = *v;
            }
        }
    }
    t
}

fn tau_coefficients(design: &PenalizedDesign, coef: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(design.tau_fixed.len() + design.tau_random.len());
    for (j, c) in design.tau_fixed.clone().enumerate() {
        out[j] = coef[c];
    }
    for (j, c) in design.tau_random.clone().enumerate() {
        out[design.tau_fixed.len() + j] = coef[c];
    }
    out
}

/// Run the competitor test on one whitened direction, using the variance
/// ratios of the full-model restricted-likelihood fit as ridge weights.
pub fn run_adzc(
    problem: &ProjectedLmmProblem,
    ratios: &VarianceRatios,
    mode: AdZcMode,
    seed: u64,
) -> Result<AdZcOutcome> {
    if let AdZcMode::Bootstrap { b } = mode {
        if b < 100 {
            return Err(Error::Config(format!(
                "bootstrap needs at least 100 resamples, got {b}"
            )));
        }
    }

    let design = assemble(problem, ratios, false);
    let mut gram = design.a.transpose() * &design.a;
    for (j, pen) in design.ridge.iter().enumerate() {
        gram[(j, j)] += pen;
    }
    let chol = Cholesky::new(gram.clone())
        .ok_or_else(|| Error::Numerical("penalized normal equations are singular".into()))?;
    let aty = design.a.transpose() * &problem.response;
    let coef = chol.solve(&aty);

    let grid: Vec<f64> = (0..EVAL_GRID)
        .map(|g| g as f64 / (EVAL_GRID - 1) as f64)
        .collect();
    let weights = trapezoid_weights(&grid);
    let t_map = tau_grid_map(problem, &design, &grid);
    let tau_hat = &t_map * tau_coefficients(&design, &coef);
    let statistic: f64 = weights
        .iter()
        .zip(tau_hat.iter())
        .map(|(w, v)| w * v * v)
        .sum();

    let p = match mode {
        AdZcMode::ChiSqMixture => {
            // Sandwich covariance of the coefficients, propagated to the grid.
            let ata = design.a.transpose() * &design.a;
            let inner = chol.solve(&ata);
            let cov_full = ratios.sigma2 * chol.solve(&inner.transpose());
            let tau_idx: Vec<usize> = design
                .tau_fixed
                .clone()
                .chain(design.tau_random.clone())
                .collect();
            let cov_tau = DMatrix::from_fn(tau_idx.len(), tau_idx.len(), |i, j| {
                cov_full[(tau_idx[i], tau_idx[j])]
            });
            let cov_grid = &t_map * cov_tau * t_map.transpose();
            let mut weighted = cov_grid;
            for i in 0..EVAL_GRID {
                for j in 0..EVAL_GRID {
                    weighted[(i, j)] *= (weights[i] * weights[j]).sqrt();
                }
            }
            let eig = SymmetricEigen::new((&weighted + weighted.transpose()) / 2.0);
            let w: Vec<f64> = eig
                .eigenvalues
                .iter()
                .cloned()
                .filter(|&v| v > 1e-12 * eig.eigenvalues.amax())
                .collect();
            if w.is_empty() || statistic == 0.0 {
                1.0
            } else {
                let mut rng = stream(seed, StreamKind::ChiSqMixture, 0, 0);
                let mut exceed = 0usize;
                for _ in 0..MIXTURE_DRAWS {
                    let draw: f64 = w
                        .iter()
                        .map(|&wj| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            wj * z * z
                        })
                        .sum();
                    exceed += (draw >= statistic) as usize;
                }
                (1.0 + exceed as f64) / (1.0 + MIXTURE_DRAWS as f64)
            }
        }
        AdZcMode::Bootstrap { b } => {
            // Refit without the treatment terms, bootstrap the whitened
            // residual pool, rebuild responses, and recompute the statistic.
            let null_design = assemble(problem, ratios, true);
            let mut null_gram = null_design.a.transpose() * &null_design.a;
            for (j, pen) in null_design.ridge.iter().enumerate() {
                null_gram[(j, j)] += pen;
            }
            let null_chol = Cholesky::new(null_gram).ok_or_else(|| {
                Error::Numerical("null-model normal equations are singular".into())
            })?;
            let null_coef = null_chol.solve(&(null_design.a.transpose() * &problem.response));
            let fitted = &null_design.a * null_coef;
            let residuals: Vec<f64> = (&problem.response - &fitted).iter().cloned().collect();
            let n = residuals.len();

            let exceed: usize = (0..b)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream(seed, StreamKind::Bootstrap, i as u64, 0);
                    let mut y_star = fitted.clone();
                    for v in y_star.iter_mut() {
                        *v += residuals[rng.gen_range(0..n)];
                    }
                    let coef_star = chol.solve(&(design.a.transpose() * y_star));
                    let tau_star = &t_map * tau_coefficients(&design, &coef_star);
                    let stat_star: f64 = weights
                        .iter()
                        .zip(tau_star.iter())
                        .map(|(w, v)| w * v * v)
                        .sum();
                    (stat_star >= statistic) as usize
                })
                .sum();
            (1.0 + exceed as f64) / (1.0 + b as f64)
        }
    };

    Ok(AdZcOutcome { statistic, p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{choose_knots, KnotRule};
    use crate::data::derive_indicators;
    use crate::fpca::{
        estimate_marginal_covariance, eigendecompose, quasi_project, CovarianceSmoothing,
        ProjectionRule,
    };
    use crate::gftest::{fit_reml, LayerCross, ALL_COMPONENTS};
    use crate::lmm::{
        build_design, estimate_within_covariance, whiten, CovarianceMethod, SplineDegrees,
    };
    use crate::sim::{generate_dataset, SimConfig};

    fn whitened(n: usize, seed: u64, delta: f64) -> ProjectedLmmProblem {
        let cfg = SimConfig {
            n,
            seed,
            delta,
            gamma_rel: 0.0,
            ..SimConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let ind = derive_indicators(&ds);
        let xi = estimate_marginal_covariance(&ds, &CovarianceSmoothing::Raw).unwrap();
        let eig = eigendecompose(&xi, &ds.grid, 0.5).unwrap();
        let proj = quasi_project(&ds, &eig, ProjectionRule::Trapezoid).unwrap();
        let days: Vec<f64> = ds
            .subjects
            .iter()
            .flat_map(|s| s.periods.iter().flatten().map(|c| c.day))
            .collect();
        let knots = choose_knots(&days, &KnotRule::default()).unwrap();
        let problem =
            build_design(&ds, &ind, &proj.layers[0], SplineDegrees::default(), &knots).unwrap();
        let cov = estimate_within_covariance(&problem, CovarianceMethod::CompoundSymmetry).unwrap();
        whiten(&problem, &cov).unwrap()
    }

    #[test]
    fn zero_response_gives_zero_statistic_and_p_one() {
        let mut problem = whitened(6, 2, 0.0);
        problem.response.fill(0.0);
        let ratios = VarianceRatios {
            pi: 0.5,
            eta: 0.5,
            gamma: 0.5,
            sigma2: 1.0,
            objective_value: 0.0,
        };
        let out = run_adzc(&problem, &ratios, AdZcMode::ChiSqMixture, 1).unwrap();
        assert_eq!(out.statistic, 0.0);
        assert_eq!(out.p, 1.0);
    }

    #[test]
    fn bootstrap_needs_enough_resamples() {
        let problem = whitened(6, 3, 0.0);
        let ratios = VarianceRatios {
            pi: 0.0,
            eta: 0.0,
            gamma: 0.0,
            sigma2: 1.0,
            objective_value: 0.0,
        };
        assert!(run_adzc(&problem, &ratios, AdZcMode::Bootstrap { b: 50 }, 1).is_err());
    }

    #[test]
    fn strong_treatment_effect_is_detected() {
        let problem = whitened(30, 11, 2.0);
        let cross = LayerCross::new(&problem);
        let ratios = fit_reml(&cross, &ALL_COMPONENTS).unwrap();
        let chisq = run_adzc(&problem, &ratios, AdZcMode::ChiSqMixture, 5).unwrap();
        assert!(chisq.p < 0.01, "chisq p = {}", chisq.p);
        let boot = run_adzc(&problem, &ratios, AdZcMode::Bootstrap { b: 199 }, 5).unwrap();
        assert!(boot.p < 0.02, "bootstrap p = {}", boot.p);
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let problem = whitened(8, 7, 0.3);
        let cross = LayerCross::new(&problem);
        let ratios = fit_reml(&cross, &ALL_COMPONENTS).unwrap();
        let a = run_adzc(&problem, &ratios, AdZcMode::Bootstrap { b: 150 }, 9).unwrap();
        let b = run_adzc(&problem, &ratios, AdZcMode::Bootstrap { b: 150 }, 9).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.statistic, b.statistic);
    }
}
