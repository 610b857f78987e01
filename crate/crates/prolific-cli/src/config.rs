//! Flat `key = value` experiment configuration.

use anyhow::{anyhow, bail, Context, Result};
use prolific::basis::KnotRule;
use prolific::fpca::{CovarianceSmoothing, ProjectionRule};
use prolific::lmm::CovarianceMethod;
use prolific::prolific::ProlificConfig;
use prolific::sim::{SimConfig, SimVariances};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    Size,
    Power,
    Analyze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Prolific,
    AdZcChiSq,
    AdZcBoot,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Prolific => "prolific",
            Method::AdZcChiSq => "adzc_chisq",
            Method::AdZcBoot => "adzc_boot",
        }
    }
}

/// Parsed experiment configuration with defaults filled in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub n_values: Vec<usize>,
    pub reps: usize,
    pub alphas: Vec<f64>,
    pub alpha1s: Vec<f64>,
    pub delta: f64,
    pub gamma_rels: Vec<f64>,
    pub delta_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub nsim: usize,
    pub pve: f64,
    pub m_range: (usize, usize),
    pub grid_size: usize,
    pub beta_a: f64,
    pub beta_b: f64,
    pub variances: SimVariances,
    pub covariance: CovarianceMethod,
    pub covariance_smoothing: CovarianceSmoothing,
    pub projection: ProjectionRule,
    pub exact_structures: bool,
    pub adzc_bootstrap_b: usize,
    pub parallel_layers: bool,
    pub master_seed: u64,
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Size,
            n_values: vec![50],
            reps: 1000,
            alphas: vec![0.01, 0.05, 0.10, 0.15],
            alpha1s: vec![0.05, 0.10],
            delta: 0.0,
            gamma_rels: vec![0.0],
            delta_grid: vec![0.0, 0.05, 0.10, 0.25],
            methods: vec![Method::Prolific],
            nsim: 2000,
            pve: 0.90,
            m_range: (8, 12),
            grid_size: 101,
            beta_a: 2.0,
            beta_b: 4.0,
            variances: SimVariances::default(),
            covariance: CovarianceMethod::CompoundSymmetry,
            covariance_smoothing: CovarianceSmoothing::LocalQuadratic { bandwidth: 0.1 },
            projection: ProjectionRule::Trapezoid,
            exact_structures: false,
            adzc_bootstrap_b: 500,
            parallel_layers: false,
            master_seed: 0,
            threads: None,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    /// Read a `key = value` file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", lineno + 1))?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (key, value) in &map {
            cfg.apply(key, value)
                .with_context(|| format!("config key `{key}`"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_list_f64 = |v: &str| -> Result<Vec<f64>> {
            v.split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| anyhow!("{e}")))
                .collect()
        };
        match key {
            "experiment" => {
                self.experiment = match value {
                    "size" => ExperimentKind::Size,
                    "power" => ExperimentKind::Power,
                    "analyze" => ExperimentKind::Analyze,
                    other => bail!("unknown experiment `{other}`"),
                }
            }
            "n" | "n_values" => {
                self.n_values = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|e| anyhow!("{e}")))
                    .collect::<Result<_>>()?;
            }
            "reps" => self.reps = value.parse()?,
            "alphas" | "alpha" => self.alphas = parse_list_f64(value)?,
            "alpha1s" | "alpha1" => self.alpha1s = parse_list_f64(value)?,
            "delta" => self.delta = value.parse()?,
            "gamma_rel" | "gamma_rels" => self.gamma_rels = parse_list_f64(value)?,
            "delta_grid" => self.delta_grid = parse_list_f64(value)?,
            "methods" => {
                self.methods = value
                    .split(',')
                    .map(|s| match s.trim() {
                        "prolific" => Ok(Method::Prolific),
                        "adzc_chisq" => Ok(Method::AdZcChiSq),
                        "adzc_boot" => Ok(Method::AdZcBoot),
                        other => bail!("unknown method `{other}`"),
                    })
                    .collect::<Result<_>>()?;
            }
            "nsim" => self.nsim = value.parse()?,
            "pve" => self.pve = value.parse()?,
            "m_min" => self.m_range.0 = value.parse()?,
            "m_max" => self.m_range.1 = value.parse()?,
            "grid_size" | "r" => self.grid_size = value.parse()?,
            "beta_a" => self.beta_a = value.parse()?,
            "beta_b" => self.beta_b = value.parse()?,
            "var_zeta1" => self.variances.zeta1 = value.parse()?,
            "var_zeta2" => self.variances.zeta2 = value.parse()?,
            "var_r1" => self.variances.r1 = value.parse()?,
            "var_r2" => self.variances.r2 = value.parse()?,
            "var_wn" => self.variances.white_noise = value.parse()?,
            "covariance" => {
                self.covariance = match value {
                    "compound_symmetry" => CovarianceMethod::CompoundSymmetry,
                    "score_fpca" => CovarianceMethod::ScoreFpca { pve: 0.90 },
                    other => bail!("unknown covariance method `{other}`"),
                }
            }
            "cov_smoothing" => {
                self.covariance_smoothing = match value {
                    "raw" => CovarianceSmoothing::Raw,
                    "local_quadratic" => CovarianceSmoothing::LocalQuadratic { bandwidth: 0.1 },
                    other => bail!("unknown covariance smoothing `{other}`"),
                }
            }
            "cov_bandwidth" => {
                self.covariance_smoothing = CovarianceSmoothing::LocalQuadratic {
                    bandwidth: value.parse()?,
                }
            }
            "projection" => {
                self.projection = match value {
                    "trapezoid" => ProjectionRule::Trapezoid,
                    "mean_sum" => ProjectionRule::MeanSum,
                    other => bail!("unknown projection rule `{other}`"),
                }
            }
            "exact_structures" => self.exact_structures = value.parse()?,
            "adzc_bootstrap_b" | "bootstrap_b" => self.adzc_bootstrap_b = value.parse()?,
            "parallel_layers" => self.parallel_layers = value.parse()?,
            "seed" | "master_seed" => self.master_seed = value.parse()?,
            "threads" => self.threads = Some(value.parse()?),
            "out" | "output_dir" => self.output_dir = PathBuf::from(value),
            other => bail!("unknown key `{other}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            bail!("reps must be at least 1");
        }
        if self.alphas.iter().any(|&a| !(0.0 < a && a < 1.0)) {
            bail!("alphas must lie in (0, 1)");
        }
        if self.alpha1s.iter().any(|&a| !(0.0 < a && a < 1.0)) {
            bail!("alpha1s must lie in (0, 1)");
        }
        if self.experiment == ExperimentKind::Size && self.delta != 0.0 {
            bail!("a size experiment requires delta = 0");
        }
        let mut prev = f64::NEG_INFINITY;
        for &d in &self.delta_grid {
            if d < 0.0 {
                bail!("delta_grid values must be nonnegative");
            }
            if d < prev {
                bail!("delta_grid must be ascending");
            }
            prev = d;
        }
        if self.methods.is_empty() {
            bail!("at least one method is required");
        }
        Ok(())
    }

    /// Simulation config of one replicate cell.
    pub fn sim_config(&self, n: usize, delta: f64, gamma_rel: f64, seed: u64) -> SimConfig {
        SimConfig {
            n,
            m_range: self.m_range,
            r: self.grid_size,
            delta,
            gamma_rel,
            beta_a: self.beta_a,
            beta_b: self.beta_b,
            variances: self.variances,
            seed,
        }
    }

    /// Test config of one replicate.
    pub fn prolific_config(&self, seed: u64) -> ProlificConfig {
        ProlificConfig {
            pve: self.pve,
            alpha: self.alphas.first().copied().unwrap_or(0.05),
            alpha1: self.alpha1s.first().copied().unwrap_or(0.10),
            nsim: self.nsim,
            covariance: self.covariance,
            covariance_smoothing: self.covariance_smoothing,
            projection: self.projection,
            smooth: Default::default(),
            degrees: Default::default(),
            knot_rule: KnotRule::default(),
            exact_structures: self.exact_structures,
            seed,
        }
    }
}
