//! Command-line interface: dataset simulation, size/power experiments,
//! single-dataset analysis, and numerical self-tests.
//!
//! Exit codes: 0 on success, 2 on configuration or input-schema errors,
//! 3 on numerical failures.

use anyhow::{Context, Result};
use prolific_cli::{config, experiments, report, selftest};
use clap::{Parser, Subcommand};
use config::{ExperimentConfig, ExperimentKind};
use prolific::data::{load_dataset, save_dataset, CsvFormat, CsvSchema};
use prolific::prolific::{build_report, run_prolific_with_info};
use prolific::sim::generate_dataset;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "prolific",
    about = "Projection-based two-stage significance testing for smooth \
             treatment effects in longitudinal functional crossover designs"
)]
struct Cli {
    /// Worker threads (default: PROLIFIC_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV.
    Simulate {
        /// Experiment config supplying the simulation parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Subjects override.
        #[arg(long)]
        n: Option<usize>,
        /// Treatment magnitude override.
        #[arg(long)]
        delta: Option<f64>,
        /// Relative carryover override.
        #[arg(long)]
        gamma_rel: Option<f64>,
        /// CSV layout.
        #[arg(long, default_value = "wide")]
        format: String,
    },
    /// Empirical size experiment.
    Size {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Power-curve experiment.
    Power {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analyze one dataset CSV and write a JSON report plus surface CSVs.
    Analyze {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Nominal day count used to normalize raw day indices.
        #[arg(long)]
        period_length: Option<f64>,
        /// Level of the treatment test.
        #[arg(long)]
        alpha: Option<f64>,
        /// Level of the stage-1 carryover test.
        #[arg(long)]
        alpha1: Option<f64>,
    },
    /// Fast numerical identity and calibration checks.
    Selftest,
}

fn is_config_error(err: &anyhow::Error) -> bool {
    if let Some(e) = err.downcast_ref::<prolific::Error>() {
        matches!(
            e,
            prolific::Error::Config(_)
                | prolific::Error::Schema { .. }
                | prolific::Error::Validation { .. }
        )
    } else {
        // Anyhow-level errors come from config parsing and validation.
        true
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();

    // --threads wins over PROLIFIC_THREADS; both default to all cores.
    let threads = cli.threads.or_else(|| {
        std::env::var("PROLIFIC_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::from(2);
        }
    }

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn load_experiment_config(
    path: &std::path::Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    expect: ExperimentKind,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    if cfg.experiment != expect {
        anyhow::bail!(
            "config declares experiment `{:?}`, command expects `{:?}`",
            cfg.experiment,
            expect
        );
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            config,
            out,
            seed,
            n,
            delta,
            gamma_rel,
            format,
        } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::from_file(&path)?,
                None => {
                    let mut map = BTreeMap::new();
                    map.insert("experiment".to_string(), "power".to_string());
                    ExperimentConfig::from_map(map)?
                }
            };
            let sim = cfg.sim_config(
                n.unwrap_or(cfg.n_values[0]),
                delta.unwrap_or(cfg.delta),
                gamma_rel.unwrap_or_else(|| cfg.gamma_rels.first().copied().unwrap_or(0.0)),
                seed.unwrap_or(cfg.master_seed),
            );
            let dataset = generate_dataset(&sim)?;
            let schema = CsvSchema {
                format: match format.as_str() {
                    "wide" => CsvFormat::Wide,
                    "long" => CsvFormat::Long,
                    other => anyhow::bail!("unknown format `{other}` (use wide or long)"),
                },
                period_length: None,
            };
            save_dataset(&dataset, &out, &schema)?;
            println!(
                "wrote {} subjects, {} curves to {}",
                dataset.n_subjects(),
                dataset.total_curves(),
                out.display()
            );
            Ok(())
        }
        Command::Size { config, out, seed } => {
            let cfg = load_experiment_config(&config, out, seed, ExperimentKind::Size)?;
            let path = experiments::experiment_size(&cfg)?;
            println!("size table written to {}", path.display());
            Ok(())
        }
        Command::Power { config, out, seed } => {
            let cfg = load_experiment_config(&config, out, seed, ExperimentKind::Power)?;
            let path = experiments::experiment_power(&cfg)?;
            println!("power table written to {}", path.display());
            Ok(())
        }
        Command::Analyze {
            dataset,
            config,
            out,
            seed,
            period_length,
            alpha,
            alpha1,
        } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::from_file(&path)?,
                None => {
                    let mut map = BTreeMap::new();
                    map.insert("experiment".to_string(), "analyze".to_string());
                    // Data-analysis preset: 95% PVE, full-size null samples.
                    map.insert("pve".to_string(), "0.95".to_string());
                    map.insert("nsim".to_string(), "5000".to_string());
                    map.insert("alphas".to_string(), "0.05".to_string());
                    map.insert("alpha1s".to_string(), "0.1".to_string());
                    ExperimentConfig::from_map(map)?
                }
            };
            let schema = CsvSchema {
                format: CsvFormat::Wide,
                period_length,
            };
            let data = load_dataset(&dataset, &schema)
                .with_context(|| format!("loading {}", dataset.display()))?;
            let mut test_cfg = cfg.prolific_config(seed.unwrap_or(cfg.master_seed));
            if let Some(alpha) = alpha {
                test_cfg.alpha = alpha;
            }
            if let Some(alpha1) = alpha1 {
                test_cfg.alpha1 = alpha1;
            }
            let (result, info, _) = run_prolific_with_info(&data, &test_cfg)?;
            std::fs::create_dir_all(&out)?;
            let report = build_report(&result, &info, &test_cfg, data.grid_len());
            report::write_report(&report, &out)?;
            report::write_surfaces(&info, &out)?;
            println!(
                "K = {}, min p = {:.4}, global reject at alpha {}: {}",
                result.k, result.min_p, result.alpha, result.global_reject
            );
            println!("report and surfaces written to {}", out.display());
            Ok(())
        }
        Command::Selftest => selftest::run(),
    }
}
