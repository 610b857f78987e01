//! Fast numerical self-checks: matrix identities, optimizer oracle, and the
//! degenerate null-sampler calibration. Runs in seconds and prints one
//! pass/fail line per check.

use anyhow::{bail, Result};
use nalgebra::{DMatrix, DVector};
use prolific::gftest::{NuisanceEval, Stage, StageDims};
use prolific::nullsim::{sample_null, ZeroStructures};
use prolific::rng::{stream, StreamKind};
use prolific::simplex::{minimize, SimplexOptions};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

fn report(name: &str, pass: bool, detail: String) -> bool {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

/// Random low-rank inverse identity on small instances.
fn check_woodbury(instances: usize) -> bool {
    let mut rng = stream(101, StreamKind::Replicate, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(20..=60);
        let q = rng.gen_range(2..=6);
        let z = DMatrix::from_fn(n, q, |_, _| rng.gen::<f64>() - 0.5);
        let ratio: f64 = 10f64.powf(rng.gen_range(-2.0..2.0));
        let v = DMatrix::<f64>::identity(n, n) + ratio * &z * z.transpose();
        let dense = v.clone().try_inverse().unwrap();
        let mut core = z.transpose() * &z;
        for i in 0..q {
            core[(i, i)] += 1.0 / ratio;
        }
        let fast =
            DMatrix::<f64>::identity(n, n) - &z * core.try_inverse().unwrap() * z.transpose();
        worst = worst.max((&dense - &fast).norm() / dense.norm());
    }
    report(
        "woodbury-low-rank-inverse",
        worst < 1e-10,
        format!("worst relative error {worst:.2e} over {instances} instances"),
    )
}

/// Projection identity
/// `V^-1 - V^-1 X (X'V^-1X)^-1 X'V^-1 = G (G'VG)^-1 G'`
/// with G an orthonormal basis of the orthocomplement of col(X).
fn check_projection_identity(instances: usize) -> bool {
    let mut rng = stream(202, StreamKind::Replicate, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(25..=60);
        let r = rng.gen_range(2..=5);
        let q = rng.gen_range(2..=6);
        let x = DMatrix::from_fn(n, r, |i, j| {
            if j == 0 {
                1.0
            } else {
                (i as f64 / n as f64).powi(j as i32) + 0.1 * (rng.gen::<f64>() - 0.5)
            }
        });
        let z = DMatrix::from_fn(n, q, |_, _| rng.gen::<f64>() - 0.5);
        let gamma: f64 = 10f64.powf(rng.gen_range(-1.0..1.5));
        let v = DMatrix::<f64>::identity(n, n) + gamma * &z * z.transpose();
        let v_inv = v.clone().try_inverse().unwrap();
        let xvx = x.transpose() * &v_inv * &x;
        let lhs = &v_inv
            - &v_inv * &x * xvx.try_inverse().unwrap() * x.transpose() * &v_inv;

        // Orthonormal complement basis from the spectral decomposition of
        // the plain projection.
        let p = &x * (x.transpose() * &x).try_inverse().unwrap() * x.transpose();
        let eig = nalgebra::SymmetricEigen::new(DMatrix::<f64>::identity(n, n) - p);
        let cols: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 0.5).collect();
        let mut g = DMatrix::zeros(n, cols.len());
        for (j, &k) in cols.iter().enumerate() {
            g.column_mut(j).copy_from(&eig.eigenvectors.column(k));
        }
        let gvg = g.transpose() * &v * &g;
        let rhs = &g * gvg.try_inverse().unwrap() * g.transpose();
        worst = worst.max((&lhs - &rhs).norm() / lhs.norm());
    }
    report(
        "whitened-projection-identity",
        worst < 1e-8,
        format!("worst relative error {worst:.2e} over {instances} instances"),
    )
}

/// Simplex REML on a one-ratio toy problem against a 2000-point log grid.
fn check_reml_oracle(instances: usize) -> bool {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let mut rng = stream(303, StreamKind::Replicate, inst as u64, 0);
        let n = 60;
        let q = 5;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 / n as f64 });
        let z = DMatrix::from_fn(n, q, |_, _| rng.gen::<f64>() - 0.5);
        let b: Vec<f64> = (0..q).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y = DVector::from_fn(n, |i, _| {
            0.4 + 0.9 * (i as f64 / n as f64)
                + (0..q).map(|j| z[(i, j)] * b[j]).sum::<f64>()
                + 0.4 * (rng.gen::<f64>() - 0.5)
        });
        let dof = (n - 2) as f64;
        let objective = |ratio: f64| -> f64 {
            let v = DMatrix::<f64>::identity(n, n) + ratio * &z * z.transpose();
            let vi = v.clone().try_inverse().unwrap();
            let xvx = x.transpose() * &vi * &x;
            let beta = xvx.clone().try_inverse().unwrap() * (x.transpose() * &vi * &y);
            let r = &y - &x * beta;
            let rss = (r.transpose() * &vi * &r)[(0, 0)];
            dof * rss.ln() + v.determinant().ln() + xvx.determinant().ln()
        };
        let mut grid_best = objective(0.0);
        for i in 0..2000 {
            let ratio = 10f64.powf(-4.0 + 8.0 * i as f64 / 1999.0);
            grid_best = grid_best.min(objective(ratio));
        }
        let out = minimize(
            |t| objective(t[0].max(0.0).exp_m1()),
            &SimplexOptions::multi_start(1),
        );
        worst = worst.max((out.value - grid_best).abs());
    }
    report(
        "reml-simplex-vs-grid",
        worst < 1e-3,
        format!("worst objective gap {worst:.2e} over {instances} instances"),
    )
}

/// Degenerate sampler: all target eigenvalues zero reduces the draw to an
/// exact chi-square ratio.
fn check_degenerate_sampler() -> bool {
    let dims = StageDims {
        n: 500,
        rank: 6,
        q_target: 10,
        h_target: 1,
    };
    let structures = ZeroStructures {
        q_target: dims.q_target,
        n_nuisance: 2,
    };
    let sample = sample_null(Stage::S1, &structures, &dims, 10_000, 11).unwrap();
    let _ = structures.q_target();

    let mut rng = stream(404, StreamKind::Replicate, 0, 0);
    let mut direct: Vec<f64> = (0..100_000)
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
    direct.sort_by(f64::total_cmp);

    let mut ks = 0.0f64;
    let mut j = 0usize;
    for (i, &d) in sample.draws.iter().enumerate() {
        while j < direct.len() && direct[j] <= d {
            j += 1;
        }
        let f1 = (i + 1) as f64 / sample.draws.len() as f64;
        let f2 = j as f64 / direct.len() as f64;
        ks = ks.max((f1 - f2).abs());
    }
    report(
        "degenerate-null-calibration",
        ks < 0.02,
        format!("KS distance {ks:.4} over 10000 draws"),
    )
}

/// Run every check; error if any fails.
pub fn run() -> Result<()> {
    let mut ok = true;
    ok &= check_woodbury(50);
    ok &= check_projection_identity(50);
    ok &= check_reml_oracle(20);
    ok &= check_degenerate_sampler();
    if !ok {
        bail!("self-test failed");
    }
    println!("all self-tests passed");
    Ok(())
}
