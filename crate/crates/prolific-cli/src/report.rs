//! Analysis outputs: the JSON report and plot-ready surface CSVs.

use anyhow::{Context, Result};
use prolific::prolific::{AnalysisReport, PipelineInfo};
use std::path::Path;

/// Write the report JSON.
pub fn write_report(report: &AnalysisReport, dir: &Path) -> Result<()> {
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(report)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn write_surface_csv(
    path: &Path,
    eval: impl Fn(f64, f64) -> f64,
    s_points: usize,
    d_points: usize,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["s", "d", "value"])?;
    for i in 0..s_points {
        let s = i as f64 / (s_points - 1) as f64;
        for j in 0..d_points {
            let d = j as f64 / (d_points - 1) as f64;
            writer.write_record([s.to_string(), d.to_string(), eval(s, d).to_string()])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Export the estimated mean components and eigenfunctions for plotting.
pub fn write_surfaces(info: &PipelineInfo, dir: &Path) -> Result<()> {
    let fit = &info.fit;
    write_surface_csv(&dir.join("mean_surface.csv"), |s, d| fit.mu.eval(s, d), 101, 21)?;
    write_surface_csv(
        &dir.join("treatment_surface.csv"),
        |s, d| fit.tau_eval(s, d),
        101,
        21,
    )?;
    write_surface_csv(
        &dir.join("carryover_surface.csv"),
        |s, d| fit.lambda_eval(s, d),
        101,
        21,
    )?;
    for curve in &fit.covariates {
        let path = dir.join(format!("covariate_effect_{}.csv", curve.name));
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record(["s", "value"])?;
        for i in 0..101 {
            let s = i as f64 / 100.0;
            writer.write_record([s.to_string(), curve.eval(s).to_string()])?;
        }
        writer.flush()?;
    }

    let eig = &info.eigensystem;
    let mut writer = csv::Writer::from_path(dir.join("eigenfunctions.csv"))?;
    let mut header = vec!["s".to_string()];
    header.extend((1..=eig.k()).map(|k| format!("phi_{k}")));
    writer.write_record(&header)?;
    for (r, &s) in eig.grid.iter().enumerate() {
        let mut row = vec![s.to_string()];
        row.extend(eig.eigenfunctions.iter().map(|phi| phi[r].to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
