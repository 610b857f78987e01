//! Per-phase timing of one full replicate.

use prolific::data::derive_indicators;
use prolific::fpca::{
    eigendecompose, estimate_marginal_covariance, quasi_project, CovarianceSmoothing,
};
use prolific::gftest::{
    fit_reml, stage_dims, Component, GriddedStructure, LayerCross, Stage, StageStructure,
    ALL_COMPONENTS,
};
use prolific::lmm::{build_design, estimate_within_covariance, whiten};
use prolific::nullsim::sample_null;
use prolific::prolific::ProlificConfig;
use prolific::sim::{generate_dataset, SimConfig};
use prolific::smooth::{demean, fit_facm_mean};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let nsim: usize = args.get(1).map_or(2000, |s| s.parse().unwrap());
    let smooth_cov = args.get(2).is_some_and(|s| s == "smooth");

    let sim = SimConfig {
        n: 50,
        seed: 1,
        ..SimConfig::default()
    };
    let cfg = ProlificConfig::default();
    let ds = generate_dataset(&sim).unwrap();
    let ind = derive_indicators(&ds);

    let t = Instant::now();
    let fit = fit_facm_mean(&ds, &ind, &cfg.smooth).unwrap();
    println!("mean fit: {:?}", t.elapsed());

    let t = Instant::now();
    let resid = demean(&ds, &fit, &ind);
    let smoothing = if smooth_cov {
        CovarianceSmoothing::LocalQuadratic { bandwidth: 0.1 }
    } else {
        CovarianceSmoothing::Raw
    };
    let xi = estimate_marginal_covariance(&resid, &smoothing).unwrap();
    println!("demean+cov ({smoothing:?}): {:?}", t.elapsed());

    let t = Instant::now();
    let eig = eigendecompose(&xi, &ds.grid, 0.9).unwrap();
    println!(
        "eigen: {:?} (K={}, pve={:.4})",
        t.elapsed(),
        eig.k(),
        eig.pve_attained()
    );

    let t = Instant::now();
    let proj = quasi_project(&ds, &eig, cfg.projection).unwrap();
    let days: Vec<f64> = ds
        .subjects
        .iter()
        .flat_map(|s| s.periods.iter().flatten().map(|c| c.day))
        .collect();
    let knots = prolific::basis::choose_knots(&days, &cfg.knot_rule).unwrap();
    let problem = build_design(&ds, &ind, &proj.layers[0], cfg.degrees, &knots).unwrap();
    let cov = estimate_within_covariance(&problem, cfg.covariance).unwrap();
    let white = whiten(&problem, &cov).unwrap();
    println!("project+design+whiten (layer 0): {:?}", t.elapsed());

    let t = Instant::now();
    let cross = LayerCross::new(&white);
    println!("cross products: {:?}", t.elapsed());

    let t = Instant::now();
    let full = fit_reml(&cross, &ALL_COMPONENTS).unwrap();
    println!("reml full: {:?} (pi={:.3} eta={:.3} gamma={:.3})", t.elapsed(), full.pi, full.eta, full.gamma);

    let t = Instant::now();
    let reduced = fit_reml(&cross, &[Component::Mu, Component::Tau]).unwrap();
    println!("reml reduced: {:?}", t.elapsed());
    let _ = reduced;

    for stage in [Stage::S1, Stage::S2a, Stage::S2b] {
        let t = Instant::now();
        let exact = StageStructure::new(&cross, stage).unwrap();
        let dims = stage_dims(&white, stage);
        let gridded = GriddedStructure::new(exact);
        let sample = sample_null(stage, &gridded, &dims, nsim, 7).unwrap();
        println!(
            "stage {stage:?}: null sample ({nsim} draws) {:?}, median {:.3}, q95 {:.3}",
            t.elapsed(),
            sample.draws[nsim / 2],
            prolific::nullsim::critical_value(&sample, 0.05),
        );
    }
}
