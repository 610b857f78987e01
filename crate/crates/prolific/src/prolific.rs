//! End-to-end orchestration: mean fit, demeaning, marginal FPCA,
//! projection, per-direction two-stage testing, and the Bonferroni-combined
//! global decision.

use crate::basis::{choose_knots, KnotRule};
use crate::data::{derive_indicators, FunctionalCrossoverDataset};
use crate::error::{Error, Result};
use crate::fpca::{
    estimate_marginal_covariance, eigendecompose, quasi_project, CovarianceSmoothing,
    MarginalEigenSystem, ProjectionRule,
};
use crate::gftest::{
    fit_reml, pqgf_statistic, stage_dims, Component, GriddedStructure, LayerCross, Stage,
    StageStructure, VarianceRatios, ALL_COMPONENTS,
};
use crate::lmm::{
    build_design, estimate_within_covariance, whiten, CovarianceMethod, ProjectedLmmProblem,
    SplineDegrees,
};
use crate::nullsim::{p_value, sample_null};
use crate::rng::derive_seed;
use crate::smooth::{demean, fit_facm_mean, MeanModelFit, SmoothConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Full configuration of one test run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProlificConfig {
    /// PVE threshold selecting the truncation level K.
    pub pve: f64,
    /// Global level of the treatment test.
    pub alpha: f64,
    /// Global level of the stage-1 carryover test.
    pub alpha1: f64,
    /// Null-distribution Monte Carlo size per stage.
    pub nsim: usize,
    pub covariance: CovarianceMethod,
    pub covariance_smoothing: CovarianceSmoothing,
    pub projection: ProjectionRule,
    pub smooth: SmoothConfig,
    pub degrees: SplineDegrees,
    pub knot_rule: KnotRule,
    /// Evaluate the nuisance eigenvalue structures exactly at every inner
    /// optimizer step instead of through the interpolated lattice.
    pub exact_structures: bool,
    pub seed: u64,
}

impl Default for ProlificConfig {
    fn default() -> Self {
        ProlificConfig {
            pve: 0.90,
            alpha: 0.05,
            alpha1: 0.10,
            nsim: 5000,
            covariance: CovarianceMethod::CompoundSymmetry,
            covariance_smoothing: CovarianceSmoothing::LocalQuadratic { bandwidth: 0.1 },
            projection: ProjectionRule::Trapezoid,
            smooth: SmoothConfig::default(),
            degrees: SplineDegrees::default(),
            knot_rule: KnotRule::default(),
            exact_structures: false,
            seed: 0,
        }
    }
}

/// Which branch resolved stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage2Branch {
    /// Carryover found significant: treatment tested under the full model.
    A,
    /// No carryover evidence: treatment tested under the reduced model.
    B,
}

/// Statistic and Monte Carlo p-value of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub statistic: f64,
    pub p: f64,
}

/// Everything computed for one direction, including both stage-2 branches
/// when requested.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerStages {
    pub k: usize,
    pub stage1: StageOutcome,
    pub stage2a: Option<StageOutcome>,
    pub stage2b: Option<StageOutcome>,
    pub ratios_full: VarianceRatios,
    pub ratios_reduced: Option<VarianceRatios>,
}

/// Decision record of one direction under a concrete `(alpha, alpha1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub k: usize,
    pub stage1_stat: f64,
    pub stage1_p: f64,
    pub carryover_rejected: bool,
    pub stage2_branch: Stage2Branch,
    pub stage2_stat: f64,
    pub stage2_p: f64,
}

/// Global test result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProlificResult {
    pub k: usize,
    pub layers: Vec<LayerRecord>,
    pub alpha: f64,
    pub alpha1: f64,
    pub global_reject: bool,
    /// Smallest stage-2 p-value across directions.
    pub min_p: f64,
}

/// Pipeline byproducts kept for reporting.
#[derive(Debug, Clone)]
pub struct PipelineInfo {
    pub fit: MeanModelFit,
    pub eigensystem: MarginalEigenSystem,
    pub covariance_method: String,
    pub n_subjects: usize,
    pub n_curves: usize,
}

/// One projected direction, whitened and ready for testing.
#[derive(Debug, Clone)]
pub struct PreparedLayer {
    pub k: usize,
    pub problem: ProjectedLmmProblem,
    pub cross: LayerCross,
}

/// Steps 1-6: mean fit, demeaning, marginal covariance, eigenbasis,
/// projection, and the per-direction mixed-model setup.
pub fn prepare_layers(
    dataset: &FunctionalCrossoverDataset,
    config: &ProlificConfig,
) -> Result<(PipelineInfo, Vec<PreparedLayer>)> {
    let g1 = dataset.subjects.iter().filter(|s| s.group == 1).count();
    let g2 = dataset.subjects.len() - g1;
    if g1 < 2 || g2 < 2 {
        return Err(Error::validation(
            "the test needs at least two subjects in each group",
        ));
    }

    let indicators = derive_indicators(dataset);
    let fit = fit_facm_mean(dataset, &indicators, &config.smooth)?;
    let residuals = demean(dataset, &fit, &indicators);
    let xi = estimate_marginal_covariance(&residuals, &config.covariance_smoothing)?;
    let eigensystem = eigendecompose(&xi, &dataset.grid, config.pve)?;
    let projected = quasi_project(dataset, &eigensystem, config.projection)?;

    let days: Vec<f64> = dataset
        .subjects
        .iter()
        .flat_map(|s| s.periods.iter().flatten().map(|c| c.day))
        .collect();
    let knots = choose_knots(&days, &config.knot_rule)?;

    let layers: Result<Vec<PreparedLayer>> = projected
        .layers
        .par_iter()
        .enumerate()
        .map(|(k, layer)| {
            let problem = build_design(dataset, &indicators, layer, config.degrees, &knots)?;
            let cov = estimate_within_covariance(&problem, config.covariance)?;
            let whitened = whiten(&problem, &cov)?;
            let cross = LayerCross::new(&whitened);
            Ok(PreparedLayer {
                k,
                problem: whitened,
                cross,
            })
        })
        .collect();

    let info = PipelineInfo {
        fit,
        eigensystem,
        covariance_method: match config.covariance {
            CovarianceMethod::CompoundSymmetry => "compound_symmetry".into(),
            CovarianceMethod::ScoreFpca { .. } => "score_fpca".into(),
        },
        n_subjects: dataset.n_subjects(),
        n_curves: dataset.total_curves(),
    };
    Ok((info, layers?))
}

fn stage_seed(config_seed: u64, k: usize, stage: Stage) -> u64 {
    let tag = match stage {
        Stage::S1 => 1,
        Stage::S2a => 2,
        Stage::S2b => 3,
    };
    derive_seed(config_seed, crate::rng::StreamKind::NullDraw, k as u64, tag)
}

fn stage_outcome(
    layer: &PreparedLayer,
    stage: Stage,
    full_fit: &VarianceRatios,
    reduced_fit: Option<&VarianceRatios>,
    config: &ProlificConfig,
) -> Result<StageOutcome> {
    let (statistic, _) = pqgf_statistic(&layer.cross, stage, full_fit, reduced_fit)?;
    let dims = stage_dims(&layer.problem, stage);
    let seed = stage_seed(config.seed, layer.k, stage);
    let exact = StageStructure::new(&layer.cross, stage)?;
    let sample = if config.exact_structures {
        sample_null(stage, &exact, &dims, config.nsim, seed)?
    } else {
        let gridded = GriddedStructure::new(exact);
        sample_null(stage, &gridded, &dims, config.nsim, seed)?
    };
    Ok(StageOutcome {
        statistic,
        p: p_value(statistic, &sample),
    })
}

/// Stage work for one direction. The window `(alpha1_lo_k, alpha1_hi_k)`
/// bounds the per-direction carryover levels the caller will evaluate:
/// stage 2a is computed when the stage-1 p-value falls below the upper
/// bound, stage 2b when it reaches the lower bound, so every decision in
/// the window can be formed without computing branches no level selects.
pub fn analyze_layer(
    layer: &PreparedLayer,
    alpha1_window: (f64, f64),
    config: &ProlificConfig,
) -> Result<LayerStages> {
    let full_fit = fit_reml(&layer.cross, &ALL_COMPONENTS)?;
    let stage1 = stage_outcome(layer, Stage::S1, &full_fit, None, config)?;

    let mut stage2a = None;
    let mut stage2b = None;
    let mut ratios_reduced = None;
    if stage1.p < alpha1_window.1 {
        stage2a = Some(stage_outcome(layer, Stage::S2a, &full_fit, None, config)?);
    }
    if stage1.p >= alpha1_window.0 {
        let reduced = fit_reml(&layer.cross, &[Component::Mu, Component::Tau])?;
        stage2b = Some(stage_outcome(
            layer,
            Stage::S2b,
            &full_fit,
            Some(&reduced),
            config,
        )?);
        ratios_reduced = Some(reduced);
    }
    Ok(LayerStages {
        k: layer.k,
        stage1,
        stage2a,
        stage2b,
        ratios_full: full_fit,
        ratios_reduced,
    })
}

/// The two-stage decision for one direction at per-direction levels
/// `(alpha_k, alpha1_k)`.
pub fn two_stage_record(stages: &LayerStages, alpha1_k: f64) -> Result<LayerRecord> {
    let carryover_rejected = stages.stage1.p < alpha1_k;
    let (branch, outcome) = if carryover_rejected {
        (
            Stage2Branch::A,
            stages.stage2a.ok_or_else(|| {
                Error::Config("stage 2a outcome missing for a rejected carryover".into())
            })?,
        )
    } else {
        (
            Stage2Branch::B,
            stages.stage2b.ok_or_else(|| {
                Error::Config("stage 2b outcome missing for a retained carryover".into())
            })?,
        )
    };
    Ok(LayerRecord {
        k: stages.k,
        stage1_stat: stages.stage1.statistic,
        stage1_p: stages.stage1.p,
        carryover_rejected,
        stage2_branch: branch,
        stage2_stat: outcome.statistic,
        stage2_p: outcome.p,
    })
}

/// Run the full two-stage test on one prepared direction.
pub fn two_stage_k(
    layer: &PreparedLayer,
    alpha_k: f64,
    alpha1_k: f64,
    config: &ProlificConfig,
) -> Result<LayerRecord> {
    let _ = alpha_k; // the per-direction record does not threshold stage 2
    let stages = analyze_layer(layer, (alpha1_k, alpha1_k), config)?;
    two_stage_record(&stages, alpha1_k)
}

/// Combine per-direction records into the Bonferroni global decision.
pub fn combine_records(
    records: Vec<LayerRecord>,
    alpha: f64,
    alpha1: f64,
) -> Result<ProlificResult> {
    if records.is_empty() {
        return Err(Error::validation("no directions retained (K = 0)"));
    }
    let k = records.len();
    let min_p = records
        .iter()
        .map(|r| r.stage2_p)
        .fold(f64::INFINITY, f64::min);
    Ok(ProlificResult {
        k,
        global_reject: min_p < alpha / k as f64,
        layers: records,
        alpha,
        alpha1,
        min_p,
    })
}

/// The complete procedure on one dataset.
pub fn run_prolific(
    dataset: &FunctionalCrossoverDataset,
    config: &ProlificConfig,
) -> Result<ProlificResult> {
    let (_, layers) = prepare_layers(dataset, config)?;
    run_on_prepared(&layers, config, None).map(|(result, _)| result)
}

/// As [`run_prolific`] but also returns the pipeline byproducts for
/// reporting.
pub fn run_prolific_with_info(
    dataset: &FunctionalCrossoverDataset,
    config: &ProlificConfig,
) -> Result<(ProlificResult, PipelineInfo, Vec<LayerStages>)> {
    let (info, layers) = prepare_layers(dataset, config)?;
    let (result, stages) = run_on_prepared(&layers, config, None)?;
    Ok((result, info, stages))
}

/// Stage work for every direction, covering decision rules for every
/// carryover level in `alpha1_values` on shared Monte Carlo draws.
pub fn run_all_stages(
    dataset: &FunctionalCrossoverDataset,
    config: &ProlificConfig,
    alpha1_values: &[f64],
) -> Result<(PipelineInfo, Vec<PreparedLayer>, Vec<LayerStages>)> {
    let (info, layers) = prepare_layers(dataset, config)?;
    let lo = alpha1_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = alpha1_values.iter().cloned().fold(0.0f64, f64::max);
    let (_, stages) = run_on_prepared(&layers, config, Some((lo, hi)))?;
    Ok((info, layers, stages))
}

fn run_on_prepared(
    layers: &[PreparedLayer],
    config: &ProlificConfig,
    alpha1_range: Option<(f64, f64)>,
) -> Result<(ProlificResult, Vec<LayerStages>)> {
    let k = layers.len();
    let alpha1_k = config.alpha1 / k as f64;
    let window = match alpha1_range {
        Some((lo, hi)) => (lo / k as f64, hi / k as f64),
        None => (alpha1_k, alpha1_k),
    };
    let stages: Result<Vec<LayerStages>> = layers
        .par_iter()
        .map(|layer| analyze_layer(layer, window, config))
        .collect();
    let stages = stages?;
    let records: Result<Vec<LayerRecord>> = stages
        .iter()
        .map(|s| two_stage_record(s, alpha1_k))
        .collect();
    let result = combine_records(records?, config.alpha, config.alpha1)?;
    Ok((result, stages))
}

/// Re-evaluate the decision rule from computed stages at another
/// `(alpha, alpha1)` without touching any Monte Carlo work.
pub fn apply_rule(stages: &[LayerStages], alpha: f64, alpha1: f64) -> Result<ProlificResult> {
    let k = stages.len();
    let alpha1_k = alpha1 / k as f64;
    let records: Result<Vec<LayerRecord>> = stages
        .iter()
        .map(|s| two_stage_record(s, alpha1_k))
        .collect();
    combine_records(records?, alpha, alpha1)
}

/// Serializable analysis report for one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub n_subjects: usize,
    pub n_curves: usize,
    pub grid_len: usize,
    pub pve_target: f64,
    pub pve_attained: f64,
    pub k: usize,
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    pub alpha: f64,
    pub alpha1: f64,
    pub nsim: usize,
    pub seed: u64,
    pub covariance_method: String,
    pub smoothing_params: Vec<SmoothingParam>,
    pub layers: Vec<LayerRecord>,
    pub global_reject: bool,
    pub min_p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothingParam {
    pub block: String,
    pub lambda: f64,
}

/// Assemble the report from a finished run.
pub fn build_report(
    result: &ProlificResult,
    info: &PipelineInfo,
    config: &ProlificConfig,
    grid_len: usize,
) -> AnalysisReport {
    AnalysisReport {
        n_subjects: info.n_subjects,
        n_curves: info.n_curves,
        grid_len,
        pve_target: info.eigensystem.pve_target,
        pve_attained: info.eigensystem.pve_attained(),
        k: result.k,
        eigenvalues: info.eigensystem.eigenvalues.clone(),
        trace: info.eigensystem.trace,
        alpha: result.alpha,
        alpha1: result.alpha1,
        nsim: config.nsim,
        seed: config.seed,
        covariance_method: info.covariance_method.clone(),
        smoothing_params: info
            .fit
            .smoothing_params
            .iter()
            .map(|(block, lambda)| SmoothingParam {
                block: block.clone(),
                lambda: *lambda,
            })
            .collect(),
        layers: result.layers.clone(),
        global_reject: result.global_reject,
        min_p: result.min_p,
    }
}
