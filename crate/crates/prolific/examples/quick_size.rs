//! Small-scale empirical size check of the full pipeline, with timing.
//!
//! Usage: quick_size [reps] [n] [nsim] [delta] [gamma_rel]

use prolific::prolific::{apply_rule, run_all_stages, ProlificConfig};
use prolific::rng::{derive_seed, StreamKind};
use prolific::sim::SimConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let reps: usize = args.get(1).map_or(30, |s| s.parse().unwrap());
    let n: usize = args.get(2).map_or(50, |s| s.parse().unwrap());
    let nsim: usize = args.get(3).map_or(500, |s| s.parse().unwrap());
    let delta: f64 = args.get(4).map_or(0.0, |s| s.parse().unwrap());
    let gamma_rel: f64 = args.get(5).map_or(0.0, |s| s.parse().unwrap());

    let t0 = Instant::now();
    let mut rejections_05_10 = 0usize;
    let mut rejections_05_05 = 0usize;
    let mut stage1_rejections = 0usize;
    let mut k_values = Vec::new();
    for rep in 0..reps {
        let t_rep = Instant::now();
        let sim = SimConfig {
            n,
            seed: derive_seed(4242, StreamKind::Replicate, rep as u64, 0),
            delta,
            gamma_rel,
            ..SimConfig::default()
        };
        let dataset = prolific::sim::generate_dataset(&sim).unwrap();
        let config = ProlificConfig {
            nsim,
            seed: derive_seed(4242, StreamKind::Replicate, rep as u64, 1),
            ..ProlificConfig::default()
        };
        let (_, _, stages) = run_all_stages(&dataset, &config, &[0.05, 0.10]).unwrap();
        let r1 = apply_rule(&stages, 0.05, 0.10).unwrap();
        let r2 = apply_rule(&stages, 0.05, 0.05).unwrap();
        rejections_05_10 += r1.global_reject as usize;
        rejections_05_05 += r2.global_reject as usize;
        stage1_rejections += r1.layers.iter().any(|l| l.carryover_rejected) as usize;
        k_values.push(r1.k);
        if rep < 3 {
            println!(
                "rep {rep}: k={} stage1_p={:?} stage2_p={:?} in {:?}",
                r1.k,
                r1.layers.iter().map(|l| l.stage1_p).collect::<Vec<_>>(),
                r1.layers.iter().map(|l| l.stage2_p).collect::<Vec<_>>(),
                t_rep.elapsed()
            );
        }
    }
    let elapsed = t0.elapsed();
    println!(
        "reps={reps} n={n} nsim={nsim} delta={delta} gamma={gamma_rel}: \
         reject(a=.05,a1=.10)={}/{reps} reject(a=.05,a1=.05)={}/{reps} \
         any-stage1-rej={}/{reps} K mode={} total={:?} per-rep={:?}",
        rejections_05_10,
        rejections_05_05,
        stage1_rejections,
        k_values.iter().filter(|&&k| k == 2).count(),
        elapsed,
        elapsed / reps as u32
    );
}
