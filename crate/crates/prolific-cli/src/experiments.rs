//! Size and power experiment harness with resumable replicate storage.
//!
//! Every replicate's raw p-values are persisted as one JSON file keyed by
//! `(n, delta, gamma, rep)`; re-running with the same configuration skips
//! finished replicates and reproduces the final tables exactly. Replicates
//! are computed in parallel chunks and written sequentially by the caller
//! thread.

use crate::config::{ExperimentConfig, ExperimentKind, Method};
use anyhow::{bail, Context, Result};
use prolific::adzc::{run_adzc, AdZcMode};
use prolific::prolific::{run_all_stages, LayerStages};
use prolific::rng::{derive_seed, StreamKind};
use prolific::sim::generate_dataset;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Raw per-replicate outcome; everything the decision rules need.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub rep: usize,
    pub n: usize,
    pub delta: f64,
    pub gamma_rel: f64,
    pub k: usize,
    /// Per direction: (stage1_p, stage2a_p, stage2b_p). A stage-2 branch no
    /// configured carryover level can select is absent.
    pub stage_p: Vec<(f64, Option<f64>, Option<f64>)>,
    /// Per direction stage-1 statistic, kept for null-consistency checks.
    pub stage1_stat: Vec<f64>,
    pub adzc_chisq_p: Option<Vec<f64>>,
    pub adzc_boot_p: Option<Vec<f64>>,
}

impl ReplicateOutcome {
    /// Two-stage Bonferroni decision at `(alpha, alpha1)`. Panics when the
    /// branch this `alpha1` selects was not computed; the replicate runner
    /// guarantees every branch inside the configured `alpha1` window.
    pub fn prolific_rejects(&self, alpha: f64, alpha1: f64) -> bool {
        let k = self.k as f64;
        self.stage_p.iter().any(|&(p1, p2a, p2b)| {
            let p2 = if p1 < alpha1 / k {
                p2a.expect("stage 2a computed for the evaluated alpha1")
            } else {
                p2b.expect("stage 2b computed for the evaluated alpha1")
            };
            p2 < alpha / k
        })
    }

    /// Plain Bonferroni decision for a competitor's per-direction p-values.
    pub fn bonferroni_rejects(p_values: &[f64], alpha: f64) -> bool {
        let k = p_values.len() as f64;
        p_values.iter().any(|&p| p < alpha / k)
    }

    pub fn rejects(&self, method: Method, alpha: f64, alpha1: f64) -> Option<bool> {
        match method {
            Method::Prolific => Some(self.prolific_rejects(alpha, alpha1)),
            Method::AdZcChiSq => self
                .adzc_chisq_p
                .as_ref()
                .map(|p| Self::bonferroni_rejects(p, alpha)),
            Method::AdZcBoot => self
                .adzc_boot_p
                .as_ref()
                .map(|p| Self::bonferroni_rejects(p, alpha)),
        }
    }
}

/// One experiment cell: a simulated data-generating setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub n: usize,
    pub delta: f64,
    pub gamma_rel: f64,
}

impl Cell {
    /// Storage key. Carryover is irrelevant at delta = 0, so those cells
    /// share files across gamma values.
    fn key(&self) -> String {
        let gamma = if self.delta == 0.0 { 0.0 } else { self.gamma_rel };
        format!("n{}_d{:.6}_g{:.6}", self.n, self.delta, gamma)
    }
}

/// Compute one replicate of one cell.
pub fn run_replicate(cfg: &ExperimentConfig, cell: Cell, rep: usize) -> Result<ReplicateOutcome> {
    // The dataset seed is shared across delta/gamma cells of the same
    // replicate index so power curves are coupled; the effect size only
    // shifts the mean surfaces.
    let sim_seed = derive_seed(cfg.master_seed, StreamKind::Replicate, rep as u64, cell.n as u64);
    let test_seed = derive_seed(
        cfg.master_seed,
        StreamKind::Replicate,
        rep as u64,
        cell.n as u64 ^ 0x9e37_79b9,
    );
    let sim = cfg.sim_config(cell.n, cell.delta, cell.gamma_rel, sim_seed);
    let dataset = generate_dataset(&sim)?;
    let test_cfg = cfg.prolific_config(test_seed);
    let (_, layers, stages) = run_all_stages(&dataset, &test_cfg, &cfg.alpha1s)?;

    let stage_p: Vec<(f64, Option<f64>, Option<f64>)> = stages
        .iter()
        .map(|s: &LayerStages| {
            (
                s.stage1.p,
                s.stage2a.map(|o| o.p),
                s.stage2b.map(|o| o.p),
            )
        })
        .collect();
    let stage1_stat: Vec<f64> = stages.iter().map(|s| s.stage1.statistic).collect();

    let want_chisq = cfg.methods.contains(&Method::AdZcChiSq);
    let want_boot = cfg.methods.contains(&Method::AdZcBoot);
    let mut adzc_chisq_p = want_chisq.then(Vec::new);
    let mut adzc_boot_p = want_boot.then(Vec::new);
    if want_chisq || want_boot {
        for (layer, stage) in layers.iter().zip(stages.iter()) {
            let seed = derive_seed(test_seed, StreamKind::Bootstrap, layer.k as u64, 0);
            if let Some(acc) = adzc_chisq_p.as_mut() {
                let out = run_adzc(
                    &layer.problem,
                    &stage.ratios_full,
                    AdZcMode::ChiSqMixture,
                    seed,
                )?;
                acc.push(out.p);
            }
            if let Some(acc) = adzc_boot_p.as_mut() {
                let out = run_adzc(
                    &layer.problem,
                    &stage.ratios_full,
                    AdZcMode::Bootstrap {
                        b: cfg.adzc_bootstrap_b,
                    },
                    seed ^ 0x5151,
                )?;
                acc.push(out.p);
            }
        }
    }

    Ok(ReplicateOutcome {
        rep,
        n: cell.n,
        delta: cell.delta,
        gamma_rel: cell.gamma_rel,
        k: stages.len(),
        stage_p,
        stage1_stat,
        adzc_chisq_p,
        adzc_boot_p,
    })
}

fn replicate_path(dir: &Path, cell: &Cell, rep: usize) -> PathBuf {
    dir.join(format!("rep_{}_{rep:05}.json", cell.key()))
}

/// Compute or load every replicate of a cell, writing new results from the
/// caller thread after each parallel chunk.
pub fn cell_outcomes(
    cfg: &ExperimentConfig,
    cell: Cell,
    progress_label: &str,
) -> Result<Vec<ReplicateOutcome>> {
    let rep_dir = cfg.output_dir.join("replicates");
    std::fs::create_dir_all(&rep_dir)
        .with_context(|| format!("cannot create {}", rep_dir.display()))?;

    let mut outcomes: Vec<Option<ReplicateOutcome>> = vec![None; cfg.reps];
    let mut pending = Vec::new();
    for (rep, slot) in outcomes.iter_mut().enumerate() {
        let path = replicate_path(&rep_dir, &cell, rep);
        match std::fs::read_to_string(&path)
            .ok()
            .and_then(|text| serde_json::from_str::<ReplicateOutcome>(&text).ok())
        {
            Some(saved) => *slot = Some(saved),
            None => pending.push(rep),
        }
    }
    if !pending.is_empty() {
        log::info!(
            "{progress_label}: computing {} of {} replicates",
            pending.len(),
            cfg.reps
        );
    }

    let chunk = 16usize;
    let start = Instant::now();
    let mut done = 0usize;
    for batch in pending.chunks(chunk) {
        let computed: Result<Vec<(usize, ReplicateOutcome)>> = batch
            .par_iter()
            .map(|&rep| run_replicate(cfg, cell, rep).map(|o| (rep, o)))
            .collect();
        for (rep, outcome) in computed? {
            let path = replicate_path(&rep_dir, &cell, rep);
            let tmp = path.with_extension("json.tmp");
            let mut file = std::fs::File::create(&tmp)?;
            file.write_all(serde_json::to_string(&outcome)?.as_bytes())?;
            file.flush()?;
            std::fs::rename(&tmp, &path)?;
            outcomes[rep] = Some(outcome);
        }
        done += batch.len();
        log::info!(
            "{progress_label}: {done}/{} new replicates, {:.1}s elapsed",
            pending.len(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(outcomes.into_iter().map(Option::unwrap).collect())
}

/// Binomial standard error of an empirical proportion.
fn mc_se(p: f64, reps: usize) -> f64 {
    (p * (1.0 - p) / reps as f64).sqrt()
}

fn config_fingerprint(cfg: &ExperimentConfig) -> String {
    // Everything that affects replicate content; scheduling knobs excluded.
    let mut c = cfg.clone();
    c.threads = None;
    c.output_dir = PathBuf::new();
    serde_json::to_string(&c).expect("config serializes")
}

fn write_manifest(cfg: &ExperimentConfig, wall_seconds: f64, rows: usize) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        config: &'a ExperimentConfig,
        fingerprint: String,
        version: &'static str,
        wall_seconds: f64,
        table_rows: usize,
    }
    let manifest = Manifest {
        config: cfg,
        fingerprint: config_fingerprint(cfg),
        version: env!("CARGO_PKG_VERSION"),
        wall_seconds,
        table_rows: rows,
    };
    let path = cfg.output_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn check_fingerprint(cfg: &ExperimentConfig) -> Result<()> {
    let path = cfg.output_dir.join("manifest.json");
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
            if let Some(old) = value.get("fingerprint").and_then(|f| f.as_str()) {
                if old != config_fingerprint(cfg) {
                    bail!(
                        "output directory {} holds results from a different \
                         configuration; choose a fresh directory",
                        cfg.output_dir.display()
                    );
                }
            }
        }
    }
    Ok(())
}

/// Empirical size table over `(method, n, alpha, alpha1)`.
pub fn experiment_size(cfg: &ExperimentConfig) -> Result<PathBuf> {
    if cfg.experiment != ExperimentKind::Size {
        bail!("experiment_size called with a non-size config");
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    check_fingerprint(cfg)?;
    let start = Instant::now();

    let mut rows: Vec<(String, usize, f64, f64, f64, f64, usize)> = Vec::new();
    for &n in &cfg.n_values {
        let cell = Cell {
            n,
            delta: 0.0,
            gamma_rel: 0.0,
        };
        let outcomes = cell_outcomes(cfg, cell, &format!("size n={n}"))?;
        for &method in &cfg.methods {
            for &alpha in &cfg.alphas {
                for &alpha1 in &cfg.alpha1s {
                    let mut hits = 0usize;
                    let mut total = 0usize;
                    for outcome in &outcomes {
                        if let Some(reject) = outcome.rejects(method, alpha, alpha1) {
                            hits += reject as usize;
                            total += 1;
                        }
                    }
                    if total == 0 {
                        continue;
                    }
                    let p = hits as f64 / total as f64;
                    rows.push((
                        method.name().to_string(),
                        n,
                        alpha,
                        alpha1,
                        p,
                        mc_se(p, total),
                        total,
                    ));
                }
            }
        }
    }

    let path = cfg.output_dir.join("size.csv");
    let mut writer = csv::Writer::from_path(&path)?;
    writer.write_record(["method", "n", "alpha", "alpha1", "empirical_size", "mc_se", "reps"])?;
    for (method, n, alpha, alpha1, size, se, reps) in &rows {
        writer.write_record([
            method.clone(),
            n.to_string(),
            alpha.to_string(),
            alpha1.to_string(),
            format!("{size:.6}"),
            format!("{se:.6}"),
            reps.to_string(),
        ])?;
    }
    writer.flush()?;
    write_manifest(cfg, start.elapsed().as_secs_f64(), rows.len())?;
    Ok(path)
}

/// Power table over `(method, n, delta, gamma_rel, alpha1)` at the first
/// configured alpha.
pub fn experiment_power(cfg: &ExperimentConfig) -> Result<PathBuf> {
    if cfg.experiment != ExperimentKind::Power {
        bail!("experiment_power called with a non-power config");
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    check_fingerprint(cfg)?;
    let start = Instant::now();
    let alpha = cfg.alphas[0];

    let mut rows: Vec<(String, usize, f64, f64, f64, f64, f64)> = Vec::new();
    for &n in &cfg.n_values {
        for &gamma_rel in &cfg.gamma_rels {
            for &delta in &cfg.delta_grid {
                let cell = Cell {
                    n,
                    delta,
                    gamma_rel,
                };
                let outcomes = cell_outcomes(
                    cfg,
                    cell,
                    &format!("power n={n} delta={delta} gamma={gamma_rel}"),
                )?;
                for &method in &cfg.methods {
                    for &alpha1 in &cfg.alpha1s {
                        let mut hits = 0usize;
                        let mut total = 0usize;
                        for outcome in &outcomes {
                            if let Some(reject) = outcome.rejects(method, alpha, alpha1) {
                                hits += reject as usize;
                                total += 1;
                            }
                        }
                        if total == 0 {
                            continue;
                        }
                        let p = hits as f64 / total as f64;
                        rows.push((
                            method.name().to_string(),
                            n,
                            delta,
                            gamma_rel,
                            alpha1,
                            p,
                            mc_se(p, total),
                        ));
                    }
                }
            }
        }
    }

    let path = cfg.output_dir.join("power.csv");
    let mut writer = csv::Writer::from_path(&path)?;
    writer.write_record(["method", "n", "delta", "gamma_rel", "alpha1", "power", "mc_se"])?;
    for (method, n, delta, gamma_rel, alpha1, power, se) in &rows {
        writer.write_record([
            method.clone(),
            n.to_string(),
            delta.to_string(),
            gamma_rel.to_string(),
            alpha1.to_string(),
            format!("{power:.6}"),
            format!("{se:.6}"),
        ])?;
    }
    writer.flush()?;
    write_manifest(cfg, start.elapsed().as_secs_f64(), rows.len())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_replicate_proportions_are_degenerate() {
        // With one replicate the empirical size is 0 or 1 and its SE is 0.
        assert_eq!(mc_se(0.0, 1), 0.0);
        assert_eq!(mc_se(1.0, 1), 0.0);
        assert!(mc_se(0.5, 100) > 0.0);
    }

    #[test]
    fn delta_zero_cells_share_storage_across_gamma() {
        let a = Cell { n: 50, delta: 0.0, gamma_rel: 0.0 };
        let b = Cell { n: 50, delta: 0.0, gamma_rel: 0.5 };
        let c = Cell { n: 50, delta: 0.1, gamma_rel: 0.5 };
        assert_eq!(a.key(), b.key());
        assert_ne!(a.key(), c.key());
    }
}
