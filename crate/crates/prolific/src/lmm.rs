//! Mixed-model arrangement of one projected layer: truncated-polynomial
//! design matrices, the within-subject covariance estimator, and whitening
//! by its inverse square root.

use crate::basis::TruncatedPolyBasis;
use crate::data::{FunctionalCrossoverDataset, TreatmentIndicators};
use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Polynomial degrees of the mean, treatment and carryover splines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineDegrees {
    pub mu: usize,
    pub tau: usize,
    pub lambda: usize,
}

impl Default for SplineDegrees {
    fn default() -> Self {
        // Truncated linear bases throughout.
        SplineDegrees {
            mu: 1,
            tau: 1,
            lambda: 1,
        }
    }
}

/// One projected layer cast as a linear mixed model.
#[derive(Debug, Clone)]
pub struct ProjectedLmmProblem {
    /// Projection scores stacked subject-major.
    pub response: DVector<f64>,
    /// `[1, d, ..., d^h_mu, C_1, ..., C_L]`.
    pub x_b: DMatrix<f64>,
    /// Indicator-masked treatment polynomial columns.
    pub x_tau: DMatrix<f64>,
    /// Indicator-masked carryover polynomial columns.
    pub x_lambda: DMatrix<f64>,
    pub z_mu: DMatrix<f64>,
    pub z_tau: DMatrix<f64>,
    pub z_lambda: DMatrix<f64>,
    /// Row range of each subject, in dataset order.
    pub subject_blocks: Vec<Range<usize>>,
    /// Subject positions sorted by id; all cross-subject accumulations run
    /// in this order so subject permutations cannot change any result.
    pub canonical_order: Vec<usize>,
    /// Day per row.
    pub days: Vec<f64>,
    pub degrees: SplineDegrees,
    pub knots: Vec<f64>,
}

impl ProjectedLmmProblem {
    pub fn n_rows(&self) -> usize {
        self.response.len()
    }

    /// Rank of the stacked fixed design `[X_b X_tau X_lambda]`:
    /// `L + h_mu + h_tau + h_lambda + 3`.
    pub fn fixed_rank(&self) -> usize {
        self.x_b.ncols() + self.x_tau.ncols() + self.x_lambda.ncols()
    }

    /// Rank of the reduced fixed design `[X_b X_tau]`.
    pub fn reduced_rank(&self) -> usize {
        self.x_b.ncols() + self.x_tau.ncols()
    }

    /// Stacked full fixed design.
    pub fn full_x(&self) -> DMatrix<f64> {
        let n = self.n_rows();
        let mut x = DMatrix::zeros(n, self.fixed_rank());
        x.columns_mut(0, self.x_b.ncols()).copy_from(&self.x_b);
        x.columns_mut(self.x_b.ncols(), self.x_tau.ncols())
            .copy_from(&self.x_tau);
        x.columns_mut(self.x_b.ncols() + self.x_tau.ncols(), self.x_lambda.ncols())
            .copy_from(&self.x_lambda);
        x
    }
}

/// Build the mixed-model design for one projected layer.
///
/// The knots are shared by the mean, treatment and carryover splines and are
/// expected to come from [`crate::basis::choose_knots`] on the pooled days.
pub fn build_design(
    dataset: &FunctionalCrossoverDataset,
    indicators: &TreatmentIndicators,
    layer: &[[Vec<f64>; 4]],
    degrees: SplineDegrees,
    knots: &[f64],
) -> Result<ProjectedLmmProblem> {
    let n_subjects = dataset.n_subjects();
    if layer.len() != n_subjects {
        return Err(Error::validation("layer does not match the dataset"));
    }
    let n: usize = dataset.total_curves();
    if n == 0 {
        return Err(Error::validation("layer has no observations"));
    }
    let l = dataset.covariate_names.len();
    let mu_basis = TruncatedPolyBasis::new(degrees.mu, knots.to_vec())?;
    let tau_basis = TruncatedPolyBasis::new(degrees.tau, knots.to_vec())?;
    let lambda_basis = TruncatedPolyBasis::new(degrees.lambda, knots.to_vec())?;
    let q = knots.len();

    let mut response = DVector::zeros(n);
    let mut x_b = DMatrix::zeros(n, degrees.mu + 1 + l);
    let mut x_tau = DMatrix::zeros(n, degrees.tau + 1);
    let mut x_lambda = DMatrix::zeros(n, degrees.lambda + 1);
    let mut z_mu = DMatrix::zeros(n, q);
    let mut z_tau = DMatrix::zeros(n, q);
    let mut z_lambda = DMatrix::zeros(n, q);
    let mut subject_blocks = Vec::with_capacity(n_subjects);
    let mut days = Vec::with_capacity(n);

    let mut row = 0usize;
    let mut any_tau = false;
    let mut any_lambda = false;
    for (i, subject) in dataset.subjects.iter().enumerate() {
        let start = row;
        for (p, period) in subject.periods.iter().enumerate() {
            let tau_on = indicators.tau_at(i, p);
            let lambda_on = indicators.lambda_at(i, p);
            any_tau |= tau_on && !period.is_empty();
            any_lambda |= lambda_on && !period.is_empty();
            for (j, curve) in period.iter().enumerate() {
                let d = curve.day;
                response[row] = layer[i][p][j];
                days.push(d);

                let (fixed_mu, random_mu) = mu_basis.row(d, true);
                for (c, v) in fixed_mu.iter().enumerate() {
                    x_b[(row, c)] = *v;
                }
                for (c, v) in subject.covariates.iter().enumerate() {
                    x_b[(row, degrees.mu + 1 + c)] = *v;
                }
                for (c, v) in random_mu.iter().enumerate() {
                    z_mu[(row, c)] = *v;
                }

                let (fixed_tau, random_tau) = tau_basis.row(d, tau_on);
                for (c, v) in fixed_tau.iter().enumerate() {
                    x_tau[(row, c)] = *v;
                }
                for (c, v) in random_tau.iter().enumerate() {
                    z_tau[(row, c)] = *v;
                }

                let (fixed_lambda, random_lambda) = lambda_basis.row(d, lambda_on);
                for (c, v) in fixed_lambda.iter().enumerate() {
                    x_lambda[(row, c)] = *v;
                }
                for (c, v) in random_lambda.iter().enumerate() {
                    z_lambda[(row, c)] = *v;
                }
                row += 1;
            }
        }
        subject_blocks.push(start..row);
    }

    if !any_tau {
        return Err(Error::DegenerateDesign {
            block: "tau".into(),
            message: "no observed curve carries the treatment indicator".into(),
        });
    }
    if !any_lambda {
        return Err(Error::DegenerateDesign {
            block: "lambda".into(),
            message: "no observed curve carries the carryover indicator".into(),
        });
    }

    let problem = ProjectedLmmProblem {
        response,
        x_b,
        x_tau,
        x_lambda,
        subject_blocks,
        canonical_order: dataset.canonical_subject_order(),
        days,
        degrees,
        knots: knots.to_vec(),
        z_mu,
        z_tau,
        z_lambda,
    };

    // The stacked fixed design must have full column rank.
    let x = problem.full_x();
    let xtx = x.transpose() * &x;
    let scale = xtx.diagonal().iter().cloned().fold(0.0f64, f64::max);
    let mut probe = xtx.clone();
    for i in 0..probe.nrows() {
        probe[(i, i)] += 1e-12 * scale;
    }
    match Cholesky::new(probe) {
        Some(c) => {
            let dmin = c
                .l_dirty()
                .diagonal()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if dmin * dmin < 1e-10 * scale {
                return Err(Error::DegenerateDesign {
                    block: "fixed".into(),
                    message: "stacked fixed design is rank deficient".into(),
                });
            }
        }
        None => {
            return Err(Error::DegenerateDesign {
                block: "fixed".into(),
                message: "stacked fixed design is rank deficient".into(),
            });
        }
    }
    Ok(problem)
}

/// Estimator used for the within-subject covariance of the scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub enum CovarianceMethod {
    /// Shared between-subject variance plus a diagonal nugget.
    #[default]
    CompoundSymmetry,
    /// Local-linear smooth of the score cross-products over day pairs,
    /// eigen-truncated, plus a nugget.
    ScoreFpca { pve: f64 },
}


/// Per-subject covariance blocks and their inverse square roots.
#[derive(Debug, Clone)]
pub struct WithinSubjectCovariance {
    pub blocks: Vec<DMatrix<f64>>,
    pub inverse_sqrt: Vec<DMatrix<f64>>,
    pub method: String,
    /// True when any moment estimate or eigenvalue had to be floored.
    pub floored: bool,
}

/// Symmetric inverse square root with eigenvalue flooring.
///
/// Returns the floored SPD block and its inverse square root; both satisfy
/// `(S^{-1/2})' S (S^{-1/2}) = I` to numerical precision.
pub fn inverse_sqrt_spd(block: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, DMatrix<f64>, bool) {
    let m = block.nrows();
    let sym = (block + block.transpose()) / 2.0;
    let eig = SymmetricEigen::new(sym);
    let mut floored = false;
    let values: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < floor {
                floored = true;
                floor
            } else {
                v
            }
        })
        .collect();
    let mut spd = DMatrix::zeros(m, m);
    let mut inv_sqrt = DMatrix::zeros(m, m);
    for (k, &lam) in values.iter().enumerate() {
        let u = eig.eigenvectors.column(k);
        let outer = u * u.transpose();
        spd += lam * &outer;
        inv_sqrt += (1.0 / lam.sqrt()) * &outer;
    }
    (spd, inv_sqrt, floored)
}

/// Estimate the within-subject covariance of one layer from working
/// residuals (scores minus an ordinary least-squares fit on the full fixed
/// design).
pub fn estimate_within_covariance(
    problem: &ProjectedLmmProblem,
    method: CovarianceMethod,
) -> Result<WithinSubjectCovariance> {
    // Working OLS fit with cross products accumulated per subject in
    // canonical order, keeping the estimator bitwise independent of how the
    // subject list is permuted.
    let x = problem.full_x();
    let r = x.ncols();
    let mut xtx = DMatrix::<f64>::zeros(r, r);
    let mut xty = DVector::<f64>::zeros(r);
    for &i in &problem.canonical_order {
        let range = problem.subject_blocks[i].clone();
        if range.is_empty() {
            continue;
        }
        let xi = x.rows(range.start, range.len());
        let yi = problem.response.rows(range.start, range.len());
        xtx += xi.transpose() * xi;
        xty += xi.transpose() * yi;
    }
    let beta = Cholesky::new(xtx)
        .ok_or_else(|| Error::Numerical("working OLS design is singular".into()))?
        .solve(&xty);
    let resid = &problem.response - &x * beta;

    let n = problem.n_rows() as f64;
    let mut total_sq = 0.0;
    for &i in &problem.canonical_order {
        for row in problem.subject_blocks[i].clone() {
            total_sq += resid[row] * resid[row];
        }
    }
    let total_var = total_sq / n;
    if total_var <= 0.0 {
        return Err(Error::Numerical("working residuals have no variance".into()));
    }
    let eig_floor = 1e-6 * total_var;

    match method {
        CovarianceMethod::CompoundSymmetry => {
            let mut cross = 0.0;
            let mut pairs = 0.0;
            for &i in &problem.canonical_order {
                let block = problem.subject_blocks[i].clone();
                let m = block.len() as f64;
                if m < 2.0 {
                    continue;
                }
                let sum: f64 = block.clone().map(|r| resid[r]).sum();
                let sq: f64 = block.clone().map(|r| resid[r] * resid[r]).sum();
                cross += sum * sum - sq;
                pairs += m * (m - 1.0);
            }
            if pairs == 0.0 {
                return Err(Error::validation(
                    "no subject has two curves; compound symmetry is unidentifiable",
                ));
            }
            let v_b = cross / pairs;
            let mut v_e = total_var - v_b;
            let mut floored = false;
            if v_e <= 0.0 {
                v_e = 0.05 * total_var;
                floored = true;
                log::warn!(
                    "nugget variance came out nonpositive; floored at {:.3e}",
                    v_e
                );
            }
            let mut blocks = Vec::with_capacity(problem.subject_blocks.len());
            let mut inverse_sqrt = Vec::with_capacity(problem.subject_blocks.len());
            for range in &problem.subject_blocks {
                let m = range.len();
                let raw = DMatrix::from_fn(m, m, |a, b| {
                    if a == b {
                        v_b + v_e
                    } else {
                        v_b
                    }
                });
                let (spd, inv, f) = inverse_sqrt_spd(&raw, eig_floor);
                floored |= f;
                blocks.push(spd);
                inverse_sqrt.push(inv);
            }
            Ok(WithinSubjectCovariance {
                blocks,
                inverse_sqrt,
                method: "compound_symmetry".into(),
                floored,
            })
        }
        CovarianceMethod::ScoreFpca { pve } => {
            score_fpca_covariance(problem, &resid, pve, total_var, eig_floor)
        }
    }
}

/// Nonparametric covariance over day pairs: local-linear surface smooth of
/// the off-diagonal residual cross-products, truncated by PVE, plus nugget.
fn score_fpca_covariance(
    problem: &ProjectedLmmProblem,
    resid: &DVector<f64>,
    pve: f64,
    total_var: f64,
    eig_floor: f64,
) -> Result<WithinSubjectCovariance> {
    if !(0.0 < pve && pve <= 1.0) {
        return Err(Error::Config(format!("PVE must be in (0, 1], got {pve}")));
    }
    let g = 21usize;
    let grid: Vec<f64> = (0..g).map(|j| j as f64 / (g - 1) as f64).collect();
    let h = 0.2f64;
    let kern = |u: f64| {
        let t = u.abs();
        if t >= 1.0 {
            0.0
        } else {
            0.75 * (1.0 - t * t)
        }
    };

    // All within-subject off-diagonal pairs, canonical order.
    let mut pairs: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &problem.canonical_order {
        let block = problem.subject_blocks[i].clone();
        for a in block.clone() {
            for b in block.clone() {
                if a != b {
                    pairs.push((problem.days[a], problem.days[b], resid[a] * resid[b]));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::validation(
            "no within-subject day pairs; covariance smoothing is impossible",
        ));
    }

    let mut gamma = DMatrix::zeros(g, g);
    for ia in 0..g {
        for ib in ia..g {
            let (da, db) = (grid[ia], grid[ib]);
            let mut ata = nalgebra::SMatrix::<f64, 3, 3>::zeros();
            let mut atz = nalgebra::SVector::<f64, 3>::zeros();
            for &(x, y, z) in &pairs {
                let w = kern((x - da) / h) * kern((y - db) / h);
                if w == 0.0 {
                    continue;
                }
                let row = [1.0, x - da, y - db];
                for i in 0..3 {
                    for j in 0..3 {
                        ata[(i, j)] += w * row[i] * row[j];
                    }
                    atz[i] += w * row[i] * z;
                }
            }
            for i in 0..3 {
                ata[(i, i)] += 1e-10;
            }
            let v = ata.cholesky().map(|c| c.solve(&atz)[0]).unwrap_or(0.0);
            gamma[(ia, ib)] = v;
            gamma[(ib, ia)] = v;
        }
    }

    // Eigen-truncate the smoothed surface at the requested PVE.
    let dl = 1.0 / (g - 1) as f64;
    let eig = SymmetricEigen::new(gamma.clone());
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().filter(|&&v| v > 0.0).sum();
    let mut kept: Vec<usize> = Vec::new();
    let mut cum = 0.0;
    for &idx in &order {
        if eig.eigenvalues[idx] <= 0.0 {
            break;
        }
        kept.push(idx);
        cum += eig.eigenvalues[idx];
        if total > 0.0 && cum / total >= pve {
            break;
        }
    }
    let mut truncated = DMatrix::zeros(g, g);
    for &idx in &kept {
        let u = eig.eigenvectors.column(idx);
        truncated += eig.eigenvalues[idx] * (u * u.transpose());
    }
    let _ = dl;

    // Nugget: total residual variance minus the average smoothed variance.
    let mut diag_at_days = 0.0;
    for &i in &problem.canonical_order {
        for row in problem.subject_blocks[i].clone() {
            let d = problem.days[row];
            diag_at_days += bilinear(&truncated, &grid, d, d);
        }
    }
    diag_at_days /= problem.days.len() as f64;
    let mut floored = false;
    let mut nugget = total_var - diag_at_days;
    if nugget <= 0.0 {
        nugget = 0.05 * total_var;
        floored = true;
        log::warn!("score covariance nugget floored at {:.3e}", nugget);
    }

    let mut blocks = Vec::with_capacity(problem.subject_blocks.len());
    let mut inverse_sqrt = Vec::with_capacity(problem.subject_blocks.len());
    for range in &problem.subject_blocks {
        let idx: Vec<usize> = range.clone().collect();
        let m = idx.len();
        let raw = DMatrix::from_fn(m, m, |a, b| {
            let v = bilinear(
                &truncated,
                &grid,
                problem.days[idx[a]],
                problem.days[idx[b]],
            );
            if a == b {
                v + nugget
            } else {
                v
            }
        });
        let (spd, inv, f) = inverse_sqrt_spd(&raw, eig_floor);
        floored |= f;
        blocks.push(spd);
        inverse_sqrt.push(inv);
    }
    Ok(WithinSubjectCovariance {
        blocks,
        inverse_sqrt,
        method: "score_fpca".into(),
        floored,
    })
}

fn bilinear(surface: &DMatrix<f64>, grid: &[f64], x: f64, y: f64) -> f64 {
    let g = grid.len();
    let step = grid[1] - grid[0];
    let locate = |v: f64| -> (usize, f64) {
        let t = (v.clamp(0.0, 1.0)) / step;
        let i = (t.floor() as usize).min(g - 2);
        (i, t - i as f64)
    };
    let (ix, fx) = locate(x);
    let (iy, fy) = locate(y);
    surface[(ix, iy)] * (1.0 - fx) * (1.0 - fy)
        + surface[(ix + 1, iy)] * fx * (1.0 - fy)
        + surface[(ix, iy + 1)] * (1.0 - fx) * fy
        + surface[(ix + 1, iy + 1)] * fx * fy
}

/// Left-multiply every subject block of the response and design matrices by
/// that subject's inverse square-root covariance.
pub fn whiten(
    problem: &ProjectedLmmProblem,
    cov: &WithinSubjectCovariance,
) -> Result<ProjectedLmmProblem> {
    if cov.blocks.len() != problem.subject_blocks.len() {
        return Err(Error::validation(
            "covariance blocks do not match the subjects",
        ));
    }
    let mut out = problem.clone();
    for (i, range) in problem.subject_blocks.iter().enumerate() {
        let m = range.len();
        if m == 0 {
            continue;
        }
        let w = &cov.inverse_sqrt[i];
        if w.nrows() != m {
            return Err(Error::validation(format!(
                "covariance block {i} has size {}, subject has {m} rows",
                w.nrows()
            )));
        }
        let resp = problem.response.rows(range.start, m).into_owned();
        out.response.rows_mut(range.start, m).copy_from(&(w * resp));
        for (src, dst) in [
            (&problem.x_b, &mut out.x_b),
            (&problem.x_tau, &mut out.x_tau),
            (&problem.x_lambda, &mut out.x_lambda),
            (&problem.z_mu, &mut out.z_mu),
            (&problem.z_tau, &mut out.z_tau),
            (&problem.z_lambda, &mut out.z_lambda),
        ] {
            let rows = src.rows(range.start, m).into_owned();
            dst.rows_mut(range.start, m).copy_from(&(w * rows));
        }
    }
    Ok(out)
}
