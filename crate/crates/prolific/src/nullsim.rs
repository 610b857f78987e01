//! Monte Carlo sampling from the approximate null distributions of the
//! pqGF statistics.
//!
//! Each draw simulates the spectral pieces of the statistic (one standard
//! normal per target eigenvalue plus two chi-square blocks), minimizes the
//! spectral form of the negative restricted profile likelihood over the free
//! variance ratios with the same simplex search the data path uses, and
//! records the statistic at the minimizer.

use crate::error::{Error, Result};
use crate::gftest::{NuisanceEval, Stage, StageDims};
use crate::rng::{stream, StreamKind};
use crate::simplex::{minimize, SimplexOptions};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Sorted Monte Carlo draws from one stage's approximate null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullDistributionSample {
    pub stage: Stage,
    /// Ascending draw values.
    pub draws: Vec<f64>,
    pub nsim: usize,
    pub seed: u64,
    /// Draws whose inner optimizer failed once and was resampled.
    pub resampled: usize,
    /// Draws recorded at a non-converged best iterate.
    pub nonconverged: usize,
}

struct DrawPieces {
    u_sq: Vec<f64>,
    chi_num: f64,
    chi_den: f64,
}

fn sample_pieces(rng: &mut impl Rng, dims: &StageDims) -> DrawPieces {
    let u_sq = (0..dims.q_target)
        .map(|_| {
            let u: f64 = StandardNormal.sample(rng);
            u * u
        })
        .collect();
    // Chi-square through the gamma distribution; the denominator block has
    // large degrees of freedom.
    let chi_num = Gamma::new((dims.h_target + 1) as f64 / 2.0, 2.0)
        .expect("positive dof")
        .sample(rng);
    let dof_den = (dims.n - dims.rank - dims.q_target) as f64;
    let chi_den = Gamma::new(dof_den / 2.0, 2.0)
        .expect("positive dof")
        .sample(rng);
    DrawPieces {
        u_sq,
        chi_num,
        chi_den,
    }
}

/// One draw: minimize the spectral restricted-likelihood objective and
/// evaluate the statistic at the minimizer. Returns `(value, converged)`.
fn one_draw(
    pieces: &DrawPieces,
    structures: &(impl NuisanceEval + ?Sized),
    dims: &StageDims,
    xi: &mut [f64],
) -> (f64, bool) {
    let n_nuis = structures.n_nuisance();
    let n_free = n_nuis + 1;
    let dof = (dims.n - dims.rank) as f64;

    let mut theta = vec![0.0; n_nuis];
    let mut local_xi = vec![0.0; structures.q_target()];
    let opts = SimplexOptions::multi_start(n_free);
    let outcome = minimize(
        |t: &[f64]| {
            for (th, &ti) in theta.iter_mut().zip(t.iter()) {
                *th = ti.max(0.0).exp_m1();
            }
            let g = t[n_nuis].max(0.0).exp_m1();
            let pen = structures.eval(&theta, &mut local_xi);
            let mut quad = pieces.chi_den;
            let mut logdet = 0.0;
            // One ln per 16-term chunk; each factor is at most ~1e9, so a
            // 16-term product cannot overflow.
            for (u2s, xs) in pieces.u_sq.chunks(16).zip(local_xi.chunks(16)) {
                let mut prod = 1.0f64;
                for (&u2, &x) in u2s.iter().zip(xs.iter()) {
                    let denom = 1.0 + g * x;
                    quad += u2 / denom;
                    prod *= denom;
                }
                logdet += prod.ln();
            }
            dof * quad.ln() + logdet + pen
        },
        &opts,
    );

    // Statistic at the minimizer.
    for (th, &ti) in theta.iter_mut().zip(outcome.point.iter()) {
        *th = ti.max(0.0).exp_m1();
    }
    let mut g = outcome.point[n_nuis].max(0.0).exp_m1();
    if g < 1e-8 {
        g = 0.0;
    }
    structures.eval(&theta, xi);
    let mut numer = pieces.chi_num;
    let mut denom_sum = pieces.chi_den;
    for (&u2, &x) in pieces.u_sq.iter().zip(xi.iter()) {
        let d = 1.0 + g * x;
        numer += u2 * g * x / d;
        denom_sum += u2 / d;
    }
    let stat = numer / (denom_sum / dims.n as f64);
    (stat, outcome.converged)
}

/// Draw `nsim` values from the stage's approximate null distribution.
///
/// Draw `i` uses a stream derived from `(seed, i)`, so the output is
/// identical for any thread count. A draw whose inner optimizer fails is
/// resampled once; a second failure records the best iterate and counts in
/// the diagnostics.
pub fn sample_null(
    stage: Stage,
    structures: &(impl NuisanceEval + ?Sized),
    dims: &StageDims,
    nsim: usize,
    seed: u64,
) -> Result<NullDistributionSample> {
    if nsim < 100 {
        return Err(Error::Config(format!(
            "null sampling needs nsim >= 100, got {nsim}"
        )));
    }
    if dims.n <= dims.rank + dims.q_target {
        return Err(Error::Config(
            "null dims leave no denominator degrees of freedom".into(),
        ));
    }

    let results: Vec<(f64, bool, bool)> = (0..nsim)
        .into_par_iter()
        .map_init(
            || vec![0.0; structures.q_target()],
            |xi, i| {
                let mut rng = stream(seed, StreamKind::NullDraw, i as u64, 0);
                let pieces = sample_pieces(&mut rng, dims);
                let (value, converged) = one_draw(&pieces, structures, dims, xi);
                if converged {
                    (value, false, false)
                } else {
                    // Resample once with a fresh sub-stream.
                    let mut rng2 = stream(seed, StreamKind::NullDraw, i as u64, 1);
                    let pieces2 = sample_pieces(&mut rng2, dims);
                    let (value2, converged2) = one_draw(&pieces2, structures, dims, xi);
                    (value2, true, !converged2)
                }
            },
        )
        .collect();

    let mut draws = Vec::with_capacity(nsim);
    let mut resampled = 0;
    let mut nonconverged = 0;
    for (value, was_resampled, still_bad) in results {
        if !value.is_finite() {
            return Err(Error::Numerical("null draw is not finite".into()));
        }
        draws.push(value);
        resampled += was_resampled as usize;
        nonconverged += still_bad as usize;
    }
    draws.sort_by(f64::total_cmp);
    Ok(NullDistributionSample {
        stage,
        draws,
        nsim,
        seed,
        resampled,
        nonconverged,
    })
}

/// Upper-tail Monte Carlo p-value with the add-one correction.
pub fn p_value(statistic: f64, sample: &NullDistributionSample) -> f64 {
    let below = sample.draws.partition_point(|&d| d < statistic);
    let exceed = sample.draws.len() - below;
    (1.0 + exceed as f64) / (1.0 + sample.nsim as f64)
}

/// Empirical `(1 - alpha)` critical value: the smallest draw whose upper
/// tail mass is at most `alpha`.
pub fn critical_value(sample: &NullDistributionSample, alpha: f64) -> f64 {
    assert!(0.0 < alpha && alpha < 1.0, "alpha must be in (0, 1)");
    let m = sample.draws.len();
    let rank = ((m + 1) as f64 - alpha * m as f64).ceil() as usize;
    let idx = rank.clamp(1, m) - 1;
    sample.draws[idx]
}

/// Degenerate structure with all target eigenvalues pinned at zero; the
/// statistic then reduces to an exact chi-square ratio, which calibration
/// tests exploit.
pub struct ZeroStructures {
    pub q_target: usize,
    pub n_nuisance: usize,
}

impl NuisanceEval for ZeroStructures {
    fn n_nuisance(&self) -> usize {
        self.n_nuisance
    }

    fn q_target(&self) -> usize {
        self.q_target
    }

    fn eval(&self, _theta: &[f64], xi: &mut [f64]) -> f64 {
        xi.fill(0.0);
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dims() -> StageDims {
        StageDims {
            n: 400,
            rank: 6,
            q_target: 8,
            h_target: 1,
        }
    }

    fn zero_sample(nsim: usize, seed: u64) -> NullDistributionSample {
        let structures = ZeroStructures {
            q_target: 8,
            n_nuisance: 2,
        };
        sample_null(Stage::S1, &structures, &toy_dims(), nsim, seed).unwrap()
    }

    #[test]
    fn draws_are_deterministic_and_sorted() {
        let a = zero_sample(200, 9);
        let b = zero_sample(200, 9);
        assert_eq!(a.draws, b.draws);
        assert!(a.draws.windows(2).all(|w| w[0] <= w[1]));
        assert!(a.draws.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn determinism_across_thread_counts() {
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool2 = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap();
        let a = pool1.install(|| zero_sample(150, 33));
        let b = pool2.install(|| zero_sample(150, 33));
        assert_eq!(a.draws, b.draws);
    }

    #[test]
    fn p_value_order_statistics() {
        let sample = zero_sample(199, 4);
        let below_min = sample.draws[0] - 1.0;
        assert_eq!(p_value(below_min, &sample), 1.0);
        let above_max = sample.draws.last().unwrap() + 1.0;
        assert!((p_value(above_max, &sample) - 1.0 / 200.0).abs() < 1e-12);
        // A statistic at the empirical 95th percentile has p close to 0.05.
        let q95 = critical_value(&sample, 0.05);
        let p = p_value(q95, &sample);
        assert!(
            (p - 0.05).abs() <= 1.0 / 200.0 + 1e-12,
            "p at the 95th percentile: {p}"
        );
    }

    #[test]
    fn critical_value_edges() {
        let sample = zero_sample(200, 5);
        let max = *sample.draws.last().unwrap();
        assert_eq!(critical_value(&sample, 1.0 / 200.0), max);
        let med = critical_value(&sample, 0.5);
        let lo = sample.draws[99];
        let hi = sample.draws[101];
        assert!(med >= lo && med <= hi);
        for alpha in [0.01, 0.05, 0.25, 0.5] {
            let c = critical_value(&sample, alpha);
            assert!(p_value(c, &sample) <= alpha + 1.0 / 201.0 + 1e-12);
        }
    }

    #[test]
    fn degenerate_structure_matches_chi_square_ratio() {
        // With all xi = 0 the draw is N * chi2_{h+1} / chi2_{N-r}.
        let dims = toy_dims();
        let sample = zero_sample(4000, 77);
        let mut rng = stream(123, StreamKind::Replicate, 0, 0);
        let mut direct_sorted: Vec<f64> = (0..100_000)
            .map(|_| {
                let num = Gamma::new((dims.h_target + 1) as f64 / 2.0, 2.0)
                    .unwrap()
                    .sample(&mut rng);
                let den = Gamma::new((dims.n - dims.rank) as f64 / 2.0, 2.0)
                    .unwrap()
                    .sample(&mut rng);
                dims.n as f64 * num / den
            })
            .collect();
        direct_sorted.sort_by(f64::total_cmp);
        // Two-sample Kolmogorov-Smirnov distance.
        let mut ks = 0.0f64;
        let mut j = 0usize;
        for (i, &d) in sample.draws.iter().enumerate() {
            while j < direct_sorted.len() && direct_sorted[j] <= d {
                j += 1;
            }
            let f1 = (i + 1) as f64 / sample.draws.len() as f64;
            let f2 = j as f64 / direct_sorted.len() as f64;
            ks = ks.max((f1 - f2).abs());
        }
        assert!(ks < 0.03, "KS distance {ks}");
    }
}
