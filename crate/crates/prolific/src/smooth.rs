//! Penalized least-squares fit of the additive mean model: tensor-product
//! cubic B-spline surfaces for the overall mean, treatment and carryover
//! effects, plus one B-spline curve in `s` per baseline covariate.
//!
//! Every curve is observed on the shared grid, so each block of the normal
//! equations factors as (day Gram) ⊗ (grid Gram); assembly never touches the
//! full row-expanded design. Smoothing parameters are selected by GCV on a
//! log-spaced grid, one coordinate pass over the blocks, ties resolved toward
//! the larger penalty.

use crate::basis::BSplineBasis;
use crate::data::{FunctionalCrossoverDataset, TreatmentIndicators};
use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

/// Mean-model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothConfig {
    /// Interior knots of the cubic basis along the curve argument `s`.
    pub s_interior_knots: usize,
    /// Interior knots of the cubic basis along the day `d`.
    pub d_interior_knots: usize,
    /// Log-spaced relative smoothing grid shared by all blocks.
    pub lambda_grid: Vec<f64>,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            s_interior_knots: 20,
            d_interior_knots: 5,
            lambda_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3],
        }
    }
}

/// A fitted tensor-product surface, linear in its coefficients.
#[derive(Debug, Clone)]
pub struct TensorSurface {
    pub s_basis: BSplineBasis,
    pub d_basis: BSplineBasis,
    /// Coefficient matrix, `n_s x n_d`.
    pub coefs: DMatrix<f64>,
}

impl TensorSurface {
    pub fn eval(&self, s: f64, d: f64) -> f64 {
        let (so, sv) = self.s_basis.eval_local(s);
        let (doff, dv) = self.d_basis.eval_local(d);
        let mut acc = 0.0;
        for (a, &bs) in sv.iter().enumerate() {
            for (b, &bd) in dv.iter().enumerate() {
                acc += bs * bd * self.coefs[(so + a, doff + b)];
            }
        }
        acc
    }

    /// Evaluate at one day for every point of a pre-tabulated `s` basis.
    fn eval_on_grid(&self, grid_rows: &[(usize, Vec<f64>)], d: f64, out: &mut [f64]) {
        let (doff, dv) = self.d_basis.eval_local(d);
        // u = coefs * b_d restricted to the non-zero d-basis entries.
        let n_s = self.coefs.nrows();
        let mut u = vec![0.0; n_s];
        for (b, &bd) in dv.iter().enumerate() {
            if bd != 0.0 {
                for (a, slot) in u.iter_mut().enumerate() {
                    *slot += self.coefs[(a, doff + b)] * bd;
                }
            }
        }
        for (r, (off, sv)) in grid_rows.iter().enumerate() {
            let mut acc = 0.0;
            for (a, &bs) in sv.iter().enumerate() {
                acc += bs * u[off + a];
            }
            out[r] = acc;
        }
    }
}

/// A fitted covariate effect curve over `s`.
#[derive(Debug, Clone)]
pub struct CovariateCurve {
    pub name: String,
    pub s_basis: BSplineBasis,
    pub coefs: DVector<f64>,
}

impl CovariateCurve {
    pub fn eval(&self, s: f64) -> f64 {
        let (off, sv) = self.s_basis.eval_local(s);
        sv.iter()
            .enumerate()
            .map(|(a, &b)| b * self.coefs[off + a])
            .sum()
    }
}

/// Fitted mean model. A missing treatment or carryover surface means its
/// indicator was never active and the component is identically zero.
#[derive(Debug, Clone)]
pub struct MeanModelFit {
    pub mu: TensorSurface,
    pub tau: Option<TensorSurface>,
    pub lambda: Option<TensorSurface>,
    pub covariates: Vec<CovariateCurve>,
    /// Selected smoothing parameter per block, in block order.
    pub smoothing_params: Vec<(String, f64)>,
    /// GCV value at the selected parameters.
    pub gcv: f64,
}

impl MeanModelFit {
    pub fn tau_eval(&self, s: f64, d: f64) -> f64 {
        self.tau.as_ref().map_or(0.0, |t| t.eval(s, d))
    }

    pub fn lambda_eval(&self, s: f64, d: f64) -> f64 {
        self.lambda.as_ref().map_or(0.0, |t| t.eval(s, d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Mu,
    Tau,
    Lambda,
    Covariate(usize),
}

impl BlockKind {
    fn name(&self, names: &[String]) -> String {
        match self {
            BlockKind::Mu => "mu".into(),
            BlockKind::Tau => "tau".into(),
            BlockKind::Lambda => "lambda".into(),
            BlockKind::Covariate(l) => format!("covariate:{}", names[*l]),
        }
    }
}

struct Block {
    kind: BlockKind,
    offset: usize,
    ncols: usize,
    /// Unscaled penalty for this block.
    penalty: DMatrix<f64>,
    /// Multiplier normalizing the penalty against the block's data Gram.
    scale: f64,
}

/// Curve-level summaries entering the Kronecker assembly.
struct CurveInfo {
    d_row: Vec<f64>,
    tau: bool,
    lambda: bool,
    /// B_s' y for this curve.
    sty: Vec<f64>,
    covariates: Vec<f64>,
}

/// Fit the mean model by penalized least squares with GCV-selected
/// smoothing parameters.
pub fn fit_facm_mean(
    dataset: &FunctionalCrossoverDataset,
    indicators: &TreatmentIndicators,
    config: &SmoothConfig,
) -> Result<MeanModelFit> {
    if dataset.total_curves() == 0 {
        return Err(Error::validation("cannot fit a mean model without curves"));
    }
    let s_basis = BSplineBasis::cubic(config.s_interior_knots);
    let d_basis = BSplineBasis::cubic(config.d_interior_knots);
    let n_s = s_basis.n_basis();
    let n_d = d_basis.n_basis();
    let n_cov = dataset.covariate_names.len();
    let r = dataset.grid_len();

    // Tabulate the s-basis on the grid once: local rows and the grid Gram.
    let grid_rows: Vec<(usize, Vec<f64>)> = dataset
        .grid
        .iter()
        .map(|&s| s_basis.eval_local(s))
        .collect();
    let mut g_s: DMatrix<f64> = DMatrix::zeros(n_s, n_s);
    for (off, sv) in &grid_rows {
        for (a, &va) in sv.iter().enumerate() {
            for (b, &vb) in sv.iter().enumerate() {
                g_s[(off + a, off + b)] += va * vb;
            }
        }
    }

    // Which effect blocks are active anywhere in the data?
    let order = dataset.canonical_subject_order();
    let mut any_tau = false;
    let mut any_lambda = false;
    for &i in &order {
        for p in 0..4 {
            if !dataset.subjects[i].periods[p].is_empty() {
                any_tau |= indicators.tau_at(i, p);
                any_lambda |= indicators.lambda_at(i, p);
            }
        }
    }

    // Per-curve summaries, in canonical subject order.
    let mut curves: Vec<CurveInfo> = Vec::with_capacity(dataset.total_curves());
    let mut yty = 0.0;
    let mut n_samples = 0usize;
    for &i in &order {
        let subject = &dataset.subjects[i];
        for p in 0..4 {
            for curve in &subject.periods[p] {
                let (doff, dv) = d_basis.eval_local(curve.day);
                let mut d_row = vec![0.0; n_d];
                d_row[doff..doff + dv.len()].copy_from_slice(&dv);
                let mut sty = vec![0.0; n_s];
                for (rr, &y) in curve.values.iter().enumerate() {
                    let (off, sv) = &grid_rows[rr];
                    for (a, &bs) in sv.iter().enumerate() {
                        sty[off + a] += bs * y;
                    }
                    yty += y * y;
                }
                n_samples += r;
                curves.push(CurveInfo {
                    d_row,
                    tau: indicators.tau_at(i, p),
                    lambda: indicators.lambda_at(i, p),
                    sty,
                    covariates: subject.covariates.clone(),
                });
            }
        }
    }

    // Day Grams per indicator pattern and covariate cross terms.
    let mut d_all: DMatrix<f64> = DMatrix::zeros(n_d, n_d);
    let mut d_tau: DMatrix<f64> = DMatrix::zeros(n_d, n_d);
    let mut d_lambda: DMatrix<f64> = DMatrix::zeros(n_d, n_d);
    let mut d_cov_all: DMatrix<f64> = DMatrix::zeros(n_d, n_cov); // sum_c C_l b_c
    let mut d_cov_tau: DMatrix<f64> = DMatrix::zeros(n_d, n_cov);
    let mut d_cov_lambda: DMatrix<f64> = DMatrix::zeros(n_d, n_cov);
    let mut cov_cross: DMatrix<f64> = DMatrix::zeros(n_cov, n_cov); // sum_c C_l C_l'
    for c in &curves {
        for a in 0..n_d {
            let ba = c.d_row[a];
            if ba == 0.0 {
                continue;
            }
            for b in 0..n_d {
                let v = ba * c.d_row[b];
                d_all[(a, b)] += v;
                if c.tau {
                    d_tau[(a, b)] += v;
                }
                if c.lambda {
                    d_lambda[(a, b)] += v;
                }
            }
            for (l, &cv) in c.covariates.iter().enumerate() {
                d_cov_all[(a, l)] += ba * cv;
                if c.tau {
                    d_cov_tau[(a, l)] += ba * cv;
                }
                if c.lambda {
                    d_cov_lambda[(a, l)] += ba * cv;
                }
            }
        }
        for l in 0..n_cov {
            for l2 in 0..n_cov {
                cov_cross[(l, l2)] += c.covariates[l] * c.covariates[l2];
            }
        }
    }

    // Block layout.
    let p_s = s_basis.second_difference_penalty();
    let p_d = d_basis.second_difference_penalty();
    let surface_penalty = {
        let id_d = DMatrix::identity(n_d, n_d);
        let id_s = DMatrix::identity(n_s, n_s);
        p_s.kronecker(&id_d) + id_s.kronecker(&p_d)
    };
    let mut blocks: Vec<Block> = Vec::new();
    let mut offset = 0usize;
    let push_surface = |kind: BlockKind, blocks: &mut Vec<Block>, offset: &mut usize| {
        blocks.push(Block {
            kind,
            offset: *offset,
            ncols: n_s * n_d,
            penalty: surface_penalty.clone(),
            scale: 0.0,
        });
        *offset += n_s * n_d;
    };
    push_surface(BlockKind::Mu, &mut blocks, &mut offset);
    if any_tau {
        push_surface(BlockKind::Tau, &mut blocks, &mut offset);
    }
    if any_lambda {
        push_surface(BlockKind::Lambda, &mut blocks, &mut offset);
    }
    for l in 0..n_cov {
        blocks.push(Block {
            kind: BlockKind::Covariate(l),
            offset,
            ncols: n_s,
            penalty: p_s.clone(),
            scale: 0.0,
        });
        offset += n_s;
    }
    let dim = offset;

    // Assemble the normal equations from the Kronecker factors.
    let mut m: DMatrix<f64> = DMatrix::zeros(dim, dim);
    let mut xty: DVector<f64> = DVector::zeros(dim);
    let day_gram = |a: BlockKind, b: BlockKind| -> Option<&DMatrix<f64>> {
        use BlockKind::*;
        match (a, b) {
            (Mu, Mu) => Some(&d_all),
            (Mu, Tau) | (Tau, Mu) | (Tau, Tau) => Some(&d_tau),
            (Mu, Lambda) | (Lambda, Mu) | (Lambda, Lambda) => Some(&d_lambda),
            (Tau, Lambda) | (Lambda, Tau) => None, // indicators are disjoint
            _ => None,
        }
    };
    for bi in &blocks {
        for bj in &blocks {
            if bj.offset < bi.offset {
                continue;
            }
            match (bi.kind, bj.kind) {
                (BlockKind::Covariate(li), BlockKind::Covariate(lj)) => {
                    let w = cov_cross[(li, lj)];
                    for a in 0..n_s {
                        for b in 0..n_s {
                            m[(bi.offset + a, bj.offset + b)] = w * g_s[(a, b)];
                        }
                    }
                }
                (BlockKind::Covariate(l), surf) | (surf, BlockKind::Covariate(l)) => {
                    let vec = match surf {
                        BlockKind::Mu => &d_cov_all,
                        BlockKind::Tau => &d_cov_tau,
                        BlockKind::Lambda => &d_cov_lambda,
                        BlockKind::Covariate(_) => unreachable!(),
                    };
                    // Cross block between a surface (rows (a, b)) and a
                    // covariate curve (rows a').
                    let (surf_off, cov_off, surf_is_i) = if matches!(bi.kind, BlockKind::Covariate(_))
                    {
                        (bj.offset, bi.offset, false)
                    } else {
                        (bi.offset, bj.offset, true)
                    };
                    for a in 0..n_s {
                        for b in 0..n_d {
                            let row = surf_off + a * n_d + b;
                            let w = vec[(b, l)];
                            for a2 in 0..n_s {
                                let col = cov_off + a2;
                                let v = w * g_s[(a, a2)];
                                if surf_is_i {
                                    m[(row, col)] = v;
                                } else {
                                    m[(col, row)] = v;
                                }
                            }
                        }
                    }
                }
                (ka, kb) => {
                    if let Some(dg) = day_gram(ka, kb) {
                        for a in 0..n_s {
                            for a2 in 0..n_s {
                                let gs = g_s[(a, a2)];
                                if gs == 0.0 {
                                    continue;
                                }
                                for b in 0..n_d {
                                    for b2 in 0..n_d {
                                        m[(bi.offset + a * n_d + b, bj.offset + a2 * n_d + b2)] =
                                            gs * dg[(b, b2)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    // Mirror the upper triangle.
    for i in 0..dim {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }

    for c in &curves {
        for bi in &blocks {
            match bi.kind {
                BlockKind::Mu | BlockKind::Tau | BlockKind::Lambda => {
                    let on = match bi.kind {
                        BlockKind::Mu => true,
                        BlockKind::Tau => c.tau,
                        BlockKind::Lambda => c.lambda,
                        _ => unreachable!(),
                    };
                    if !on {
                        continue;
                    }
                    for b in 0..n_d {
                        let bd = c.d_row[b];
                        if bd == 0.0 {
                            continue;
                        }
                        for a in 0..n_s {
                            xty[bi.offset + a * n_d + b] += bd * c.sty[a];
                        }
                    }
                }
                BlockKind::Covariate(l) => {
                    let cv = c.covariates[l];
                    for a in 0..n_s {
                        xty[bi.offset + a] += cv * c.sty[a];
                    }
                }
            }
        }
    }

    // Penalty scales make the lambda grid dimensionless per block.
    for block in &mut blocks {
        let tr_m: f64 = (0..block.ncols)
            .map(|i| m[(block.offset + i, block.offset + i)])
            .sum();
        let tr_p: f64 = (0..block.ncols).map(|i| block.penalty[(i, i)]).sum();
        block.scale = if tr_p > 0.0 { tr_m / tr_p } else { 0.0 };
    }

    // Cholesky factor of M itself feeds the trace term of GCV; a tiny ridge
    // keeps the factorization alive when the data Gram is barely singular.
    let m_factor: Option<DMatrix<f64>> = {
        let mut m_reg = m.clone();
        let ridge = 1e-12 * m.diagonal().iter().sum::<f64>() / dim as f64;
        for i in 0..dim {
            m_reg[(i, i)] += ridge.max(1e-300);
        }
        Cholesky::new(m_reg).map(|c| c.unpack())
    };

    let assemble = |lambdas: &[f64]| -> DMatrix<f64> {
        let mut a = m.clone();
        for (block, &lam) in blocks.iter().zip(lambdas.iter()) {
            let w = lam * block.scale;
            if w == 0.0 {
                continue;
            }
            for i in 0..block.ncols {
                for j in 0..block.ncols {
                    a[(block.offset + i, block.offset + j)] += w * block.penalty[(i, j)];
                }
            }
        }
        a
    };

    let gcv_eval = |lambdas: &[f64]| -> Result<(f64, f64, Cholesky<f64, Dyn>)> {
        let a = assemble(lambdas);
        let chol = Cholesky::new(a).ok_or_else(|| rank_error(&blocks, &m, dataset))?;
        let beta = chol.solve(&xty);
        let rss = (yty - 2.0 * beta.dot(&xty) + beta.dot(&(&m * &beta))).max(0.0);
        let edf = match &m_factor {
            Some(c_lower) => {
                // tr(A^{-1} M) = ||L^{-1} C||_F^2 with A = L L', M = C C'.
                let mut t = c_lower.clone();
                solve_lower_rhs_lower(chol.l_dirty(), &mut t);
                t.iter().map(|v| v * v).sum::<f64>()
            }
            None => {
                let sol = chol.solve(&m);
                sol.diagonal().sum()
            }
        };
        // Whole curves, not grid samples, are the independent units; the
        // model complexity is charged once per curve sample so smoothing
        // still has teeth against the within-curve correlation.
        let n = n_samples as f64;
        let denom = (n - (r as f64) * edf).max(1.0);
        Ok((n * rss / (denom * denom), rss, chol))
    };

    // Coordinate pass over the blocks, ascending grid, ties toward the
    // larger penalty.
    let grid = &config.lambda_grid;
    let mid = grid[grid.len() / 2];
    let mut lambdas = vec![mid; blocks.len()];
    for bi in 0..blocks.len() {
        let mut best_lambda = lambdas[bi];
        let mut best_here = f64::INFINITY;
        for &lam in grid {
            lambdas[bi] = lam;
            let (gcv, _, _) = gcv_eval(&lambdas)?;
            if gcv <= best_here {
                best_here = gcv;
                best_lambda = lam;
            }
        }
        lambdas[bi] = best_lambda;
        let _ = best_here;
    }

    let (final_gcv, _, chol) = gcv_eval(&lambdas)?;
    let beta = chol.solve(&xty);

    // Unpack coefficients.
    let mut mu = None;
    let mut tau = None;
    let mut lambda_surface = None;
    let mut covariates = Vec::new();
    let mut smoothing_params = Vec::new();
    for (block, &lam) in blocks.iter().zip(lambdas.iter()) {
        smoothing_params.push((block.kind.name(&dataset.covariate_names), lam));
        match block.kind {
            BlockKind::Mu | BlockKind::Tau | BlockKind::Lambda => {
                let coefs = DMatrix::from_fn(n_s, n_d, |a, b| beta[block.offset + a * n_d + b]);
                let surface = TensorSurface {
                    s_basis: s_basis.clone(),
                    d_basis: d_basis.clone(),
                    coefs,
                };
                match block.kind {
                    BlockKind::Mu => mu = Some(surface),
                    BlockKind::Tau => tau = Some(surface),
                    BlockKind::Lambda => lambda_surface = Some(surface),
                    _ => unreachable!(),
                }
            }
            BlockKind::Covariate(l) => {
                covariates.push(CovariateCurve {
                    name: dataset.covariate_names[l].clone(),
                    s_basis: s_basis.clone(),
                    coefs: DVector::from_fn(n_s, |a, _| beta[block.offset + a]),
                });
            }
        }
    }

    Ok(MeanModelFit {
        mu: mu.expect("mu block always present"),
        tau,
        lambda: lambda_surface,
        covariates,
        smoothing_params,
        gcv: final_gcv,
    })
}

fn rank_error(
    blocks: &[Block],
    m: &DMatrix<f64>,
    dataset: &FunctionalCrossoverDataset,
) -> Error {
    // Name the first block whose own penalized Gram is not positive definite.
    for block in blocks {
        let mut sub: DMatrix<f64> = DMatrix::zeros(block.ncols, block.ncols);
        for i in 0..block.ncols {
            for j in 0..block.ncols {
                sub[(i, j)] = m[(block.offset + i, block.offset + j)];
            }
        }
        let floor = 1e-10 * block.scale.max(1.0);
        sub += floor * &block.penalty;
        if Cholesky::new(sub).is_none() {
            return Error::DegenerateDesign {
                block: block.kind.name(&dataset.covariate_names),
                message: "block Gram is rank deficient after the penalization floor".into(),
            };
        }
    }
    Error::DegenerateDesign {
        block: "joint".into(),
        message: "stacked design is rank deficient across blocks".into(),
    }
}

/// Solve `L T = C` in place for lower-triangular `L` and lower-triangular
/// right-hand side `C`, skipping the structural zeros above each column's
/// diagonal. Column-blocked so each `L` column stays hot across the block.
fn solve_lower_rhs_lower(l: &DMatrix<f64>, c: &mut DMatrix<f64>) {
    let n = l.nrows();
    debug_assert_eq!(c.nrows(), n);
    let ls = l.as_slice();
    let cs = c.as_mut_slice();
    const BLOCK: usize = 16;
    for jb in (0..n).step_by(BLOCK) {
        let jend = (jb + BLOCK).min(n);
        for k in jb..n {
            let lcol = &ls[k * n..(k + 1) * n];
            let inv = 1.0 / lcol[k];
            for j in jb..jend.min(k + 1) {
                let col = &mut cs[j * n..(j + 1) * n];
                let x = col[k] * inv;
                col[k] = x;
                if x != 0.0 {
                    for (ci, &li) in col[k + 1..].iter_mut().zip(lcol[k + 1..].iter()) {
                        *ci -= li * x;
                    }
                }
            }
        }
    }
}

/// Residual curves after removing every fitted mean component.
pub fn demean(
    dataset: &FunctionalCrossoverDataset,
    fit: &MeanModelFit,
    indicators: &TreatmentIndicators,
) -> FunctionalCrossoverDataset {
    let grid_rows: Vec<(usize, Vec<f64>)> = dataset
        .grid
        .iter()
        .map(|&s| fit.mu.s_basis.eval_local(s))
        .collect();
    let r = dataset.grid_len();
    let mut out = dataset.clone();
    let mut mu_vals = vec![0.0; r];
    let mut effect_vals = vec![0.0; r];
    // Covariate curves on the grid, once.
    let cov_grid: Vec<Vec<f64>> = fit
        .covariates
        .iter()
        .map(|c| dataset.grid.iter().map(|&s| c.eval(s)).collect())
        .collect();

    for (i, subject) in out.subjects.iter_mut().enumerate() {
        for p in 0..4 {
            let tau_on = indicators.tau_at(i, p);
            let lambda_on = indicators.lambda_at(i, p);
            for curve in &mut subject.periods[p] {
                fit.mu.eval_on_grid(&grid_rows, curve.day, &mut mu_vals);
                for (v, m) in curve.values.iter_mut().zip(mu_vals.iter()) {
                    *v -= m;
                }
                if tau_on {
                    if let Some(t) = &fit.tau {
                        t.eval_on_grid(&grid_rows, curve.day, &mut effect_vals);
                        for (v, e) in curve.values.iter_mut().zip(effect_vals.iter()) {
                            *v -= e;
                        }
                    }
                }
                if lambda_on {
                    if let Some(l) = &fit.lambda {
                        l.eval_on_grid(&grid_rows, curve.day, &mut effect_vals);
                        for (v, e) in curve.values.iter_mut().zip(effect_vals.iter()) {
                            *v -= e;
                        }
                    }
                }
                for (cv, curve_vals) in subject.covariates.iter().zip(cov_grid.iter()) {
                    for (v, g) in curve.values.iter_mut().zip(curve_vals.iter()) {
                        *v -= cv * g;
                    }
                }
            }
        }
    }
    out
}
