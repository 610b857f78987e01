//! Synthetic crossover data generator used by the size/power studies.
//!
//! Subjects are split evenly between the two groups, each period holds a
//! uniformly drawn number of curves observed at uniform days in `[0, 1]`,
//! and every curve is a smooth mean plus a two-component random process and
//! white noise on a dense shared grid.

use crate::data::{
    lambda_indicator, tau_indicator, CurveObservation, FunctionalCrossoverDataset, SubjectRecord,
};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamKind};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Score variances of the generating process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimVariances {
    /// Subject-level score on the first basis function.
    pub zeta1: f64,
    /// Subject-level score on the second basis function.
    pub zeta2: f64,
    /// Curve-level score on the first basis function.
    pub r1: f64,
    /// Curve-level score on the second basis function.
    pub r2: f64,
    /// White measurement noise per grid point.
    pub white_noise: f64,
}

impl Default for SimVariances {
    fn default() -> Self {
        SimVariances {
            zeta1: 1.0,
            zeta2: 0.7,
            r1: 0.5,
            r2: 0.1,
            white_noise: 0.25,
        }
    }
}

/// Full specification of one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of subjects.
    pub n: usize,
    /// Inclusive range for the number of curves per (subject, period).
    pub m_range: (usize, usize),
    /// Grid size.
    pub r: usize,
    /// Treatment magnitude; zero switches the treatment and carryover off.
    pub delta: f64,
    /// Carryover magnitude relative to the treatment.
    pub gamma_rel: f64,
    /// Beta-density shape parameters of the day profile.
    pub beta_a: f64,
    pub beta_b: f64,
    pub variances: SimVariances,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 50,
            m_range: (8, 12),
            r: 101,
            delta: 0.0,
            gamma_rel: 0.0,
            beta_a: 2.0,
            beta_b: 4.0,
            variances: SimVariances::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("simulation needs at least 2 subjects".into()));
        }
        if self.m_range.0 == 0 || self.m_range.0 > self.m_range.1 {
            return Err(Error::Config(format!(
                "m_range must be a positive interval, got [{}, {}]",
                self.m_range.0, self.m_range.1
            )));
        }
        if self.r < 2 {
            return Err(Error::Config("grid size must be at least 2".into()));
        }
        if self.delta < 0.0 || self.gamma_rel < 0.0 {
            return Err(Error::Config("delta and gamma_rel must be nonnegative".into()));
        }
        if self.beta_a <= 0.0 || self.beta_b <= 0.0 {
            return Err(Error::Config("beta shapes must be positive".into()));
        }
        let v = &self.variances;
        if [v.zeta1, v.zeta2, v.r1, v.r2, v.white_noise]
            .iter()
            .any(|x| *x <= 0.0)
        {
            return Err(Error::Config("all variances must be positive".into()));
        }
        Ok(())
    }
}

/// Beta(a, b) density, zero outside `[0, 1]`.
pub fn beta_density(x: f64, a: f64, b: f64) -> Result<f64> {
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::Config(format!(
            "beta shapes must be positive, got a={a}, b={b}"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Ok(0.0);
    }
    if x == 0.0 {
        return Ok(if a > 1.0 {
            0.0
        } else if a == 1.0 {
            b
        } else {
            f64::INFINITY
        });
    }
    if x == 1.0 {
        return Ok(if b > 1.0 {
            0.0
        } else if b == 1.0 {
            a
        } else {
            f64::INFINITY
        });
    }
    let ln_beta = statrs::function::beta::ln_beta(a, b);
    Ok(((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta).exp())
}

/// The two orthonormal basis functions of the generating process.
pub fn process_basis(s: f64) -> (f64, f64) {
    let c = std::f64::consts::SQRT_2;
    (c * (2.0 * PI * s).sin(), c * (2.0 * PI * s).cos())
}

/// True mean, treatment and carryover surfaces of the generator.
#[derive(Debug, Clone, Copy)]
pub struct TrueSurfaces {
    pub delta: f64,
    pub gamma_rel: f64,
    pub beta_a: f64,
    pub beta_b: f64,
}

impl TrueSurfaces {
    pub fn mu(&self, s: f64, d: f64) -> f64 {
        2.0 * d * (PI * s / 2.0).cos()
    }

    pub fn tau(&self, s: f64, d: f64) -> f64 {
        let f = beta_density(0.8 * d, self.beta_a, self.beta_b).unwrap_or(0.0);
        self.delta * (PI * s / 2.0).cos() * (1.0 + 4.0 * f)
    }

    pub fn lambda(&self, s: f64, d: f64) -> f64 {
        if self.delta == 0.0 || self.gamma_rel == 0.0 {
            return 0.0;
        }
        let f = beta_density(2.0 * d / 3.0 + 0.8, self.beta_a, self.beta_b).unwrap_or(0.0);
        self.delta * self.gamma_rel * (PI * s / 2.0).cos() * (1.0 + 4.0 * f)
    }
}

/// The surface triple for a config.
pub fn true_surfaces(config: &SimConfig) -> TrueSurfaces {
    TrueSurfaces {
        delta: config.delta,
        gamma_rel: config.gamma_rel,
        beta_a: config.beta_a,
        beta_b: config.beta_b,
    }
}

/// Latent scores of one generated curve, kept for oracle checks.
#[derive(Debug, Clone, Copy)]
pub struct CurveLatents {
    pub r1: f64,
    pub r2: f64,
}

/// Latent scores of one generated subject.
#[derive(Debug, Clone)]
pub struct SubjectLatents {
    pub zeta1: f64,
    pub zeta2: f64,
    /// Per period, per curve.
    pub curves: [Vec<CurveLatents>; 4],
}

/// Generate a dataset and keep the latent scores alongside it.
pub fn generate_with_latents(
    config: &SimConfig,
) -> Result<(FunctionalCrossoverDataset, Vec<SubjectLatents>)> {
    config.validate()?;
    let grid: Vec<f64> = (0..config.r)
        .map(|j| j as f64 / (config.r - 1) as f64)
        .collect();
    let surfaces = true_surfaces(config);
    let group_one = config.n.div_ceil(2);
    let id_width = config.n.to_string().len().max(3);

    let rows: Vec<(SubjectRecord, SubjectLatents)> = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(config.seed, StreamKind::Subject, i as u64, 0);
            let std_normal = Normal::new(0.0, 1.0).unwrap();
            let group: u8 = if i < group_one { 1 } else { 2 };
            let v = &config.variances;
            let zeta1 = std_normal.sample(&mut rng) * v.zeta1.sqrt();
            let zeta2 = std_normal.sample(&mut rng) * v.zeta2.sqrt();

            let mut periods: [Vec<CurveObservation>; 4] = Default::default();
            let mut latents: [Vec<CurveLatents>; 4] = Default::default();
            for p in 0..4 {
                let m: usize = rng.gen_range(config.m_range.0..=config.m_range.1);
                let tau_on = tau_indicator(group, p);
                let lambda_on = lambda_indicator(group, p);
                for _ in 0..m {
                    let day: f64 = rng.gen_range(0.0..1.0);
                    let r1 = std_normal.sample(&mut rng) * v.r1.sqrt();
                    let r2 = std_normal.sample(&mut rng) * v.r2.sqrt();
                    let mut values = Vec::with_capacity(config.r);
                    for &s in &grid {
                        let (phi1, phi2) = process_basis(s);
                        let mut y = surfaces.mu(s, day)
                            + (zeta1 + r1) * phi1
                            + (zeta2 + r2) * phi2
                            + std_normal.sample(&mut rng) * v.white_noise.sqrt();
                        if tau_on {
                            y += surfaces.tau(s, day);
                        }
                        if lambda_on {
                            y += surfaces.lambda(s, day);
                        }
                        values.push(y);
                    }
                    periods[p].push(CurveObservation { day, values });
                    latents[p].push(CurveLatents { r1, r2 });
                }
            }

            let record = SubjectRecord {
                id: format!("s{:0width$}", i + 1, width = id_width),
                group,
                covariates: Vec::new(),
                periods,
            };
            (
                record,
                SubjectLatents {
                    zeta1,
                    zeta2,
                    curves: latents,
                },
            )
        })
        .collect();

    let (subjects, latents): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let dataset = FunctionalCrossoverDataset::new(subjects, grid, Vec::new())?;
    Ok((dataset, latents))
}

/// Generate a dataset from the config.
pub fn generate_dataset(config: &SimConfig) -> Result<FunctionalCrossoverDataset> {
    generate_with_latents(config).map(|(ds, _)| ds)
}
