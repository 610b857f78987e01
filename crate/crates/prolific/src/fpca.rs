//! Marginal covariance of the demeaned curves, its eigenbasis, and
//! quasi-projections of the observed curves onto the estimated
//! eigenfunctions.

use crate::data::FunctionalCrossoverDataset;
use crate::error::{Error, Result};
use crate::quad::trapezoid_weights;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// How the pooled covariance is post-processed before eigendecomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub enum CovarianceSmoothing {
    /// Pooled empirical covariance as-is.
    #[default]
    Raw,
    /// Local-quadratic smooth of the off-diagonal entries with the diagonal
    /// re-imputed from the smooth, stripping the white-noise nugget.
    LocalQuadratic { bandwidth: f64 },
}


/// Pooled empirical marginal covariance of the (demeaned) curves.
///
/// Accumulation runs per subject in canonical id order, so the result is
/// bitwise independent of how the subject list is permuted.
pub fn estimate_marginal_covariance(
    residuals: &FunctionalCrossoverDataset,
    smoothing: &CovarianceSmoothing,
) -> Result<DMatrix<f64>> {
    let r = residuals.grid_len();
    let n_curves = residuals.total_curves();
    if n_curves < 2 {
        return Err(Error::validation(
            "marginal covariance needs at least two curves",
        ));
    }
    let mut xi: DMatrix<f64> = DMatrix::zeros(r, r);
    let mut subject_acc: DMatrix<f64> = DMatrix::zeros(r, r);
    for &i in &residuals.canonical_subject_order() {
        subject_acc.fill(0.0);
        for period in &residuals.subjects[i].periods {
            for curve in period {
                for a in 0..r {
                    let ya = curve.values[a];
                    if ya == 0.0 {
                        continue;
                    }
                    for b in a..r {
                        subject_acc[(a, b)] += ya * curve.values[b];
                    }
                }
            }
        }
        xi += &subject_acc;
    }
    xi /= n_curves as f64;
    for a in 0..r {
        for b in 0..a {
            xi[(a, b)] = xi[(b, a)];
        }
    }

    match smoothing {
        CovarianceSmoothing::Raw => Ok(xi),
        CovarianceSmoothing::LocalQuadratic { bandwidth } => {
            Ok(local_quadratic_smooth(&xi, &residuals.grid, *bandwidth))
        }
    }
}

/// Local-quadratic surface smooth of the off-diagonal covariance entries.
fn local_quadratic_smooth(xi: &DMatrix<f64>, grid: &[f64], bandwidth: f64) -> DMatrix<f64> {
    let r = grid.len();
    let h = bandwidth.max(2.0 * (grid[r - 1] - grid[0]) / r as f64);
    let mut out = DMatrix::zeros(r, r);
    let kern = |u: f64| -> f64 {
        let t = u.abs();
        if t >= 1.0 {
            0.0
        } else {
            0.75 * (1.0 - t * t)
        }
    };
    for a in 0..r {
        for b in a..r {
            let (sa, sb) = (grid[a], grid[b]);
            // Weighted quadratic fit over off-diagonal points near (sa, sb).
            let mut ata = nalgebra::SMatrix::<f64, 6, 6>::zeros();
            let mut atz = nalgebra::SVector::<f64, 6>::zeros();
            let lo_a = grid.partition_point(|&s| s < sa - h);
            let hi_a = grid.partition_point(|&s| s <= sa + h);
            let lo_b = grid.partition_point(|&s| s < sb - h);
            let hi_b = grid.partition_point(|&s| s <= sb + h);
            for p in lo_a..hi_a {
                for q in lo_b..hi_b {
                    if p == q {
                        continue;
                    }
                    let w = kern((grid[p] - sa) / h) * kern((grid[q] - sb) / h);
                    if w == 0.0 {
                        continue;
                    }
                    let x = grid[p] - sa;
                    let y = grid[q] - sb;
                    let row = [1.0, x, y, x * x, x * y, y * y];
                    for i in 0..6 {
                        for j in 0..6 {
                            ata[(i, j)] += w * row[i] * row[j];
                        }
                        atz[i] += w * row[i] * xi[(p, q)];
                    }
                }
            }
            for i in 0..6 {
                ata[(i, i)] += 1e-12;
            }
            let value = ata
                .cholesky()
                .map(|c| c.solve(&atz)[0])
                .unwrap_or(xi[(a, b)]);
            out[(a, b)] = value;
            out[(b, a)] = value;
        }
    }
    out
}

/// Orthonormal eigenbasis of the marginal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEigenSystem {
    pub grid: Vec<f64>,
    /// `K` eigenfunctions sampled on the grid, L2-orthonormal under
    /// trapezoid weights.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// Matching eigenvalues, nonincreasing and positive.
    pub eigenvalues: Vec<f64>,
    pub pve_target: f64,
    /// Total variance: the integrated diagonal of the covariance.
    pub trace: f64,
}

impl MarginalEigenSystem {
    pub fn k(&self) -> usize {
        self.eigenfunctions.len()
    }

    /// Fraction of the trace explained by the retained directions.
    pub fn pve_attained(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.trace
    }
}

/// Spectral decomposition of the covariance with PVE-based truncation:
/// `K` is the smallest truncation whose eigenvalue sum reaches the target
/// fraction of the integrated variance.
pub fn eigendecompose(xi: &DMatrix<f64>, grid: &[f64], pve: f64) -> Result<MarginalEigenSystem> {
    if !(0.0 < pve && pve <= 1.0) {
        return Err(Error::Config(format!("PVE must be in (0, 1], got {pve}")));
    }
    let r = grid.len();
    if xi.nrows() != r || xi.ncols() != r {
        return Err(Error::validation("covariance does not match the grid"));
    }
    let weights = trapezoid_weights(grid);
    let trace: f64 = (0..r).map(|i| weights[i] * xi[(i, i)]).sum();
    if trace <= 0.0 {
        return Err(Error::Numerical(
            "marginal covariance has no variance to decompose".into(),
        ));
    }

    // Symmetrized operator W^{1/2} Xi W^{1/2}; eigenvectors map back to
    // L2-orthonormal functions through W^{-1/2}.
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut sym = xi.clone();
    for a in 0..r {
        for b in 0..r {
            sym[(a, b)] *= sqrt_w[a] * sqrt_w[b];
        }
    }
    for a in 0..r {
        for b in 0..a {
            let v = (sym[(a, b)] + sym[(b, a)]) / 2.0;
            sym[(a, b)] = v;
            sym[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut eigenvalues = Vec::new();
    let mut eigenfunctions = Vec::new();
    let mut cum = 0.0;
    for &idx in &order {
        let lam = eig.eigenvalues[idx];
        if lam <= 0.0 {
            break;
        }
        let mut phi: Vec<f64> = (0..r)
            .map(|a| eig.eigenvectors[(a, idx)] / sqrt_w[a])
            .collect();
        // Sign convention: the entry of largest magnitude is positive.
        let (mut max_abs, mut max_val) = (0.0f64, 0.0f64);
        for &v in &phi {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_val = v;
            }
        }
        if max_val < 0.0 {
            phi.iter_mut().for_each(|v| *v = -*v);
        }
        eigenvalues.push(lam);
        eigenfunctions.push(phi);
        cum += lam;
        if cum / trace >= pve {
            break;
        }
    }
    if eigenfunctions.is_empty() {
        return Err(Error::Numerical(
            "no positive eigenvalues in the marginal covariance".into(),
        ));
    }

    Ok(MarginalEigenSystem {
        grid: grid.to_vec(),
        eigenfunctions,
        eigenvalues,
        pve_target: pve,
        trace,
    })
}

/// Quadrature convention for the projection scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[derive(Default)]
pub enum ProjectionRule {
    /// Trapezoid integral of `Y * phi_k` over `[0, 1]`. Canonical.
    #[default]
    Trapezoid,
    /// Plain grid mean `R^{-1} sum_r Y(s_r) phi_k(s_r)`; differs from the
    /// trapezoid score by a boundary-weight constant that cancels in every
    /// ratio statistic.
    MeanSum,
}


/// Projection scores, one layer per retained eigenfunction, mirroring the
/// subject/period/curve structure of the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedDataset {
    /// `scores[k][subject][period][j]`
    pub layers: Vec<Vec<[Vec<f64>; 4]>>,
}

impl ProjectedDataset {
    pub fn k(&self) -> usize {
        self.layers.len()
    }
}

/// Project every curve onto every retained eigenfunction.
pub fn quasi_project(
    curves: &FunctionalCrossoverDataset,
    eigsys: &MarginalEigenSystem,
    rule: ProjectionRule,
) -> Result<ProjectedDataset> {
    if curves.grid != eigsys.grid {
        return Err(Error::validation(
            "curves and eigensystem are sampled on different grids",
        ));
    }
    let r = curves.grid_len();
    let weights = match rule {
        ProjectionRule::Trapezoid => trapezoid_weights(&curves.grid),
        ProjectionRule::MeanSum => vec![1.0 / r as f64; r],
    };
    let mut layers = Vec::with_capacity(eigsys.k());
    for phi in &eigsys.eigenfunctions {
        let wphi: Vec<f64> = weights.iter().zip(phi.iter()).map(|(w, p)| w * p).collect();
        let mut per_subject = Vec::with_capacity(curves.n_subjects());
        for subject in &curves.subjects {
            let mut periods: [Vec<f64>; 4] = Default::default();
            for (p, period) in subject.periods.iter().enumerate() {
                periods[p] = period
                    .iter()
                    .map(|c| {
                        c.values
                            .iter()
                            .zip(wphi.iter())
                            .map(|(y, w)| y * w)
                            .sum::<f64>()
                    })
                    .collect();
            }
            per_subject.push(periods);
        }
        layers.push(per_subject);
    }
    Ok(ProjectedDataset { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CurveObservation, SubjectRecord};
    use crate::quad::inner_product;
    use crate::sim::process_basis;
    use approx::assert_abs_diff_eq;

    fn grid(r: usize) -> Vec<f64> {
        (0..r).map(|j| j as f64 / (r - 1) as f64).collect()
    }

    fn dataset_from_curves(grid: Vec<f64>, curves: Vec<Vec<f64>>) -> FunctionalCrossoverDataset {
        let subjects = curves
            .into_iter()
            .enumerate()
            .map(|(i, values)| SubjectRecord {
                id: format!("s{i:03}"),
                group: 1 + (i % 2) as u8,
                covariates: vec![],
                periods: [
                    vec![CurveObservation { day: 0.5, values }],
                    vec![],
                    vec![],
                    vec![],
                ],
            })
            .collect();
        FunctionalCrossoverDataset::new(subjects, grid, vec![]).unwrap()
    }

    /// Rank-2 covariance built from the generator's basis pair.
    fn rank2_covariance(g: &[f64]) -> DMatrix<f64> {
        let r = g.len();
        DMatrix::from_fn(r, r, |a, b| {
            let (p1a, p2a) = process_basis(g[a]);
            let (p1b, p2b) = process_basis(g[b]);
            1.5 * p1a * p1b + 0.8 * p2a * p2b
        })
    }

    #[test]
    fn zero_residuals_give_zero_matrix_and_eigen_errors() {
        let g = grid(21);
        let ds = dataset_from_curves(g.clone(), vec![vec![0.0; 21], vec![0.0; 21]]);
        let xi = estimate_marginal_covariance(&ds, &CovarianceSmoothing::Raw).unwrap();
        assert!(xi.iter().all(|&v| v == 0.0));
        assert!(eigendecompose(&xi, &g, 0.9).is_err());
    }

    #[test]
    fn duplicating_curves_leaves_covariance_unchanged() {
        let g = grid(21);
        let c1: Vec<f64> = g.iter().map(|&s| (3.0 * s).sin()).collect();
        let c2: Vec<f64> = g.iter().map(|&s| 1.0 - s).collect();
        let xi1 = estimate_marginal_covariance(
            &dataset_from_curves(g.clone(), vec![c1.clone(), c2.clone()]),
            &CovarianceSmoothing::Raw,
        )
        .unwrap();
        let xi2 = estimate_marginal_covariance(
            &dataset_from_curves(g.clone(), vec![c1.clone(), c2.clone(), c1, c2]),
            &CovarianceSmoothing::Raw,
        )
        .unwrap();
        assert_abs_diff_eq!((xi1 - xi2).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_two_eigenstructure_is_recovered() {
        let g = grid(101);
        let xi = rank2_covariance(&g);
        let eig = eigendecompose(&xi, &g, 0.9).unwrap();
        assert_eq!(eig.k(), 2);
        assert_abs_diff_eq!(eig.eigenvalues[0], 1.5, epsilon = 1e-6);
        assert_abs_diff_eq!(eig.eigenvalues[1], 0.8, epsilon = 1e-6);
        for k in 0..2usize {
            let phi = &eig.eigenfunctions[k];
            let target: Vec<f64> = g
                .iter()
                .map(|&s| {
                    if k == 0 {
                        process_basis(s).0
                    } else {
                        process_basis(s).1
                    }
                })
                .collect();
            let sup_plus = phi
                .iter()
                .zip(target.iter())
                .map(|(v, t)| (v - t).abs())
                .fold(0.0f64, f64::max);
            let sup_minus = phi
                .iter()
                .zip(target.iter())
                .map(|(v, t)| (v + t).abs())
                .fold(0.0f64, f64::max);
            assert!(
                sup_plus.min(sup_minus) < 1e-3,
                "eigenfunction {k} sup error {}",
                sup_plus.min(sup_minus)
            );
        }

        // PVE = 1 on a rank-2 matrix still truncates at K = 2.
        let full = eigendecompose(&xi, &g, 1.0).unwrap();
        assert_eq!(full.k(), 2);
    }

    #[test]
    fn eigenfunctions_are_quadrature_orthonormal() {
        let g = grid(101);
        let xi = rank2_covariance(&g);
        let eig = eigendecompose(&xi, &g, 0.9).unwrap();
        let w = trapezoid_weights(&g);
        for j in 0..eig.k() {
            for k in 0..eig.k() {
                let ip = inner_product(&w, &eig.eigenfunctions[j], &eig.eigenfunctions[k]);
                let expect = if j == k { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(ip, expect, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn scaling_curves_scales_eigenvalues_not_functions() {
        let g = grid(61);
        let curves: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                g.iter()
                    .map(|&s| ((i + 1) as f64 * 2.1 * s).sin() + 0.1 * i as f64)
                    .collect()
            })
            .collect();
        let ds = dataset_from_curves(g.clone(), curves.clone());
        let scaled = dataset_from_curves(
            g.clone(),
            curves
                .iter()
                .map(|c| c.iter().map(|v| 3.0 * v).collect())
                .collect(),
        );
        let e1 = eigendecompose(
            &estimate_marginal_covariance(&ds, &CovarianceSmoothing::Raw).unwrap(),
            &g,
            0.95,
        )
        .unwrap();
        let e2 = eigendecompose(
            &estimate_marginal_covariance(&scaled, &CovarianceSmoothing::Raw).unwrap(),
            &g,
            0.95,
        )
        .unwrap();
        assert_eq!(e1.k(), e2.k());
        for k in 0..e1.k() {
            assert_abs_diff_eq!(e2.eigenvalues[k] / e1.eigenvalues[k], 9.0, epsilon = 1e-8);
            for (a, b) in e1.eigenfunctions[k].iter().zip(e2.eigenfunctions[k].iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn projection_of_eigenfunctions_is_the_identity() {
        let g = grid(101);
        let xi = rank2_covariance(&g);
        let eig = eigendecompose(&xi, &g, 0.9).unwrap();
        let ds = dataset_from_curves(
            g.clone(),
            vec![eig.eigenfunctions[0].clone(), vec![0.0; g.len()]],
        );
        let proj = quasi_project(&ds, &eig, ProjectionRule::Trapezoid).unwrap();
        assert_abs_diff_eq!(proj.layers[0][0][0][0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(proj.layers[1][0][0][0], 0.0, epsilon = 1e-6);
        // The zero curve projects to zero on every layer.
        assert_eq!(proj.layers[0][1][0][0], 0.0);
        assert_eq!(proj.layers[1][1][0][0], 0.0);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let g = grid(51);
        let xi = rank2_covariance(&g);
        let eig = eigendecompose(&xi, &g, 0.9).unwrap();
        let other = dataset_from_curves(grid(41), vec![vec![1.0; 41]]);
        assert!(quasi_project(&other, &eig, ProjectionRule::Trapezoid).is_err());
    }

    #[test]
    fn parseval_bound_holds_at_full_rank() {
        let g = grid(41);
        let curves: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                g.iter()
                    .map(|&s| ((i + 1) as f64 * 1.7 * s).cos() * (1.0 + 0.2 * i as f64))
                    .collect()
            })
            .collect();
        let ds = dataset_from_curves(g.clone(), curves.clone());
        let xi = estimate_marginal_covariance(&ds, &CovarianceSmoothing::Raw).unwrap();
        let eig = eigendecompose(&xi, &g, 1.0).unwrap();
        let proj = quasi_project(&ds, &eig, ProjectionRule::Trapezoid).unwrap();
        let w = trapezoid_weights(&g);
        for (c, curve) in curves.iter().enumerate() {
            let energy: f64 = inner_product(&w, curve, curve);
            let score_sum: f64 = (0..eig.k()).map(|k| proj.layers[k][c][0][0].powi(2)).sum();
            assert!(
                score_sum <= energy + 1e-6,
                "curve {c}: score sum {score_sum} exceeds energy {energy}"
            );
        }
    }
}
