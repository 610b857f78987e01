//! Generalized-F machinery on a whitened layer: restricted-likelihood
//! estimation of the variance ratios, generalized residual sums of squares,
//! the three pqGF statistics, and the eigenvalue structures feeding their
//! null distributions.
//!
//! Everything runs through cross products of the whitened response and
//! design blocks. With `V = I + sum_a ratio_a Z_a Z_a'`, all V-weighted
//! quantities use the low-rank identity
//! `A' V^{-1} B = A'B - (U'A)' (D^{-1} + U'U)^{-1} (U'B)`,
//! so no N x N matrix is ever formed.

use crate::error::{Error, Result};
use crate::lmm::ProjectedLmmProblem;
use crate::simplex::{minimize, SimplexOptions};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Variance components of the projected model, in fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Mu,
    Tau,
    Lambda,
}

pub const ALL_COMPONENTS: [Component; 3] = [Component::Mu, Component::Tau, Component::Lambda];

impl Component {
    fn index(self) -> usize {
        match self {
            Component::Mu => 0,
            Component::Tau => 1,
            Component::Lambda => 2,
        }
    }
}

/// REML estimates of the variance ratios for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatios {
    pub pi: f64,
    pub eta: f64,
    pub gamma: f64,
    /// Profiled error variance `RSS_gls / (N - rank)`.
    pub sigma2: f64,
    /// Attained negative restricted log-profile likelihood (up to constants).
    pub objective_value: f64,
}

impl VarianceRatios {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Mu => self.pi,
            Component::Tau => self.eta,
            Component::Lambda => self.gamma,
        }
    }
}

/// Cached cross products of one whitened layer.
#[derive(Debug, Clone)]
pub struct LayerCross {
    pub n: usize,
    /// X column counts: `[b, tau, lambda]`.
    pub p: [usize; 3],
    /// Z column counts per component.
    pub q: [usize; 3],
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    xtx: DMatrix<f64>,
    ztw: DVector<f64>,
    xtw: DVector<f64>,
    wtw: f64,
}

impl LayerCross {
    /// Accumulate the cross products subject by subject in canonical order.
    pub fn new(problem: &ProjectedLmmProblem) -> Self {
        let n = problem.n_rows();
        let p = [
            problem.x_b.ncols(),
            problem.x_tau.ncols(),
            problem.x_lambda.ncols(),
        ];
        let q = [
            problem.z_mu.ncols(),
            problem.z_tau.ncols(),
            problem.z_lambda.ncols(),
        ];
        let qt: usize = q.iter().sum();
        let r: usize = p.iter().sum();
        let mut ztz = DMatrix::zeros(qt, qt);
        let mut ztx = DMatrix::zeros(qt, r);
        let mut xtx = DMatrix::zeros(r, r);
        let mut ztw = DVector::zeros(qt);
        let mut xtw = DVector::zeros(r);
        let mut wtw = 0.0;
        for &i in &problem.canonical_order {
            let range = problem.subject_blocks[i].clone();
            let m = range.len();
            if m == 0 {
                continue;
            }
            let mut z = DMatrix::zeros(m, qt);
            z.columns_mut(0, q[0])
                .copy_from(&problem.z_mu.rows(range.start, m));
            z.columns_mut(q[0], q[1])
                .copy_from(&problem.z_tau.rows(range.start, m));
            z.columns_mut(q[0] + q[1], q[2])
                .copy_from(&problem.z_lambda.rows(range.start, m));
            let mut x = DMatrix::zeros(m, r);
            x.columns_mut(0, p[0])
                .copy_from(&problem.x_b.rows(range.start, m));
            x.columns_mut(p[0], p[1])
                .copy_from(&problem.x_tau.rows(range.start, m));
            x.columns_mut(p[0] + p[1], p[2])
                .copy_from(&problem.x_lambda.rows(range.start, m));
            let w = problem.response.rows(range.start, m);
            ztz += z.transpose() * &z;
            ztx += z.transpose() * &x;
            xtx += x.transpose() * &x;
            ztw += z.transpose() * w;
            xtw += x.transpose() * w;
            wtw += w.dot(&w);
        }
        LayerCross {
            n,
            p,
            q,
            ztz,
            ztx,
            xtx,
            ztw,
            xtw,
            wtw,
        }
    }

    fn z_range(&self, c: Component) -> std::ops::Range<usize> {
        let start: usize = self.q[..c.index()].iter().sum();
        start..start + self.q[c.index()]
    }

    fn x_range(&self, part: usize) -> std::ops::Range<usize> {
        let start: usize = self.p[..part].iter().sum();
        start..start + self.p[part]
    }
}

/// Column selection of the fixed design per qRSS variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrssVariant {
    /// Full model: `[X_b X_tau X_lambda]`, `V(pi, eta, gamma)`.
    Full,
    /// Carryover null: `[X_b X_tau]`, `V(pi, eta, 0)`.
    NullStage1,
    /// Treatment null under the full model: `[X_b X_lambda]`, `V(pi, 0, gamma)`.
    NullStage2a,
    /// Treatment null under the reduced model: `[X_b]`, `V(pi, 0, 0)`.
    NullStage2b,
    /// Reduced (no-carryover) model itself; same algebra as `NullStage1`.
    ReducedNoLambda,
}

impl QrssVariant {
    fn x_parts(self) -> &'static [usize] {
        match self {
            QrssVariant::Full => &[0, 1, 2],
            QrssVariant::NullStage1 | QrssVariant::ReducedNoLambda => &[0, 1],
            QrssVariant::NullStage2a => &[0, 2],
            QrssVariant::NullStage2b => &[0],
        }
    }

    fn v_components(self) -> &'static [Component] {
        match self {
            QrssVariant::Full => &[Component::Mu, Component::Tau, Component::Lambda],
            QrssVariant::NullStage1 | QrssVariant::ReducedNoLambda => {
                &[Component::Mu, Component::Tau]
            }
            QrssVariant::NullStage2a => &[Component::Mu, Component::Lambda],
            QrssVariant::NullStage2b => &[Component::Mu],
        }
    }
}

/// Pieces of a V-weighted least squares solve.
struct GlsParts {
    rss: f64,
    logdet_v: f64,
    logdet_xvx: f64,
}

fn gls_parts(
    cross: &LayerCross,
    x_parts: &[usize],
    components: &[(Component, f64)],
) -> Result<GlsParts> {
    // Active low-rank columns.
    let mut u_idx: Vec<usize> = Vec::new();
    let mut d_diag: Vec<f64> = Vec::new();
    for &(c, ratio) in components {
        if ratio > 0.0 {
            for j in cross.z_range(c) {
                u_idx.push(j);
                d_diag.push(ratio);
            }
        }
    }
    let x_idx: Vec<usize> = x_parts
        .iter()
        .flat_map(|&part| cross.x_range(part))
        .collect();
    let r = x_idx.len();

    let xtx = DMatrix::from_fn(r, r, |a, b| cross.xtx[(x_idx[a], x_idx[b])]);
    let xtw = DVector::from_fn(r, |a, _| cross.xtw[x_idx[a]]);

    let (xvx, xvw, wvw, logdet_v) = if u_idx.is_empty() {
        (xtx, xtw, cross.wtw, 0.0)
    } else {
        let k = u_idx.len();
        let utu = DMatrix::from_fn(k, k, |a, b| cross.ztz[(u_idx[a], u_idx[b])]);
        let utx = DMatrix::from_fn(k, r, |a, b| cross.ztx[(u_idx[a], x_idx[b])]);
        let utw = DVector::from_fn(k, |a, _| cross.ztw[u_idx[a]]);

        // log|V| = log det(I + D^{1/2} U'U D^{1/2}).
        let mut v_small = DMatrix::from_fn(k, k, |a, b| {
            (d_diag[a] * d_diag[b]).sqrt() * utu[(a, b)]
        });
        for i in 0..k {
            v_small[(i, i)] += 1.0;
        }
        let chol_v = Cholesky::new(v_small)
            .ok_or_else(|| Error::Numerical("low-rank determinant factor not SPD".into()))?;
        let logdet_v: f64 = chol_v.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();

        // M = D^{-1} + U'U.
        let mut m = utu;
        for i in 0..k {
            m[(i, i)] += 1.0 / d_diag[i];
        }
        let chol_m = Cholesky::new(m)
            .ok_or_else(|| Error::Numerical("Woodbury core matrix not SPD".into()))?;
        let minv_utx = chol_m.solve(&utx);
        let minv_utw = chol_m.solve(&utw);
        let xvx = &xtx - utx.transpose() * &minv_utx;
        let xvw = &xtw - utx.transpose() * &minv_utw;
        let wvw = cross.wtw - utw.dot(&minv_utw);
        (xvx, xvw, wvw, logdet_v)
    };

    let chol_xvx = Cholesky::new(xvx)
        .ok_or_else(|| Error::Numerical("generalized cross-product X'V^-1X is singular".into()))?;
    let logdet_xvx: f64 = chol_xvx
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| 2.0 * d.ln())
        .sum();
    let beta = chol_xvx.solve(&xvw);
    let rss = (wvw - xvw.dot(&beta)).max(0.0);
    Ok(GlsParts {
        rss,
        logdet_v,
        logdet_xvx,
    })
}

/// Generalized residual sum of squares
/// `W'(I - H) V^{-1} (I - H) W`, equal to the GLS residual quadratic form.
/// The `sigma^2` scale is omitted; it cancels in every ratio statistic.
pub fn compute_qrss(cross: &LayerCross, variant: QrssVariant, ratios: &VarianceRatios) -> Result<f64> {
    let comps: Vec<(Component, f64)> = variant
        .v_components()
        .iter()
        .map(|&c| (c, ratios.get(c)))
        .collect();
    gls_parts(cross, variant.x_parts(), &comps).map(|g| g.rss)
}

/// Restricted-likelihood fit of the variance ratios for the model whose
/// active components are given. The fixed design follows the active set:
/// all three components use the full design, `{mu, tau}` the reduced one.
pub fn fit_reml(cross: &LayerCross, active: &[Component]) -> Result<VarianceRatios> {
    if active.is_empty() {
        return Err(Error::Config("REML needs at least one active component".into()));
    }
    let x_parts: &[usize] = if active.contains(&Component::Lambda) {
        &[0, 1, 2]
    } else if active.contains(&Component::Tau) {
        &[0, 1]
    } else {
        &[0]
    };
    let rank: usize = x_parts.iter().map(|&part| cross.p[part]).sum();
    let dof = (cross.n - rank) as f64;

    let objective = |t: &[f64]| -> f64 {
        let comps: Vec<(Component, f64)> = active
            .iter()
            .zip(t.iter())
            .map(|(&c, &ti)| (c, ti.max(0.0).exp_m1()))
            .collect();
        match gls_parts(cross, x_parts, &comps) {
            Ok(g) if g.rss > 0.0 => dof * g.rss.ln() + g.logdet_v + g.logdet_xvx,
            _ => f64::INFINITY,
        }
    };

    let opts = SimplexOptions::multi_start(active.len());
    let outcome = minimize(objective, &opts);
    if !outcome.converged {
        log::warn!(
            "REML simplex did not converge; best point {:?} objective {}",
            outcome.point,
            outcome.value
        );
        return Err(Error::NonConvergence {
            best_objective: outcome.value,
        });
    }

    let mut ratios = VarianceRatios {
        pi: 0.0,
        eta: 0.0,
        gamma: 0.0,
        sigma2: 0.0,
        objective_value: outcome.value,
    };
    for (&c, &t) in active.iter().zip(outcome.point.iter()) {
        let mut ratio = t.max(0.0).exp_m1();
        if ratio < 1e-8 {
            ratio = 0.0;
        }
        match c {
            Component::Mu => ratios.pi = ratio,
            Component::Tau => ratios.eta = ratio,
            Component::Lambda => ratios.gamma = ratio,
        }
    }
    let comps: Vec<(Component, f64)> = active.iter().map(|&c| (c, ratios.get(c))).collect();
    let g = gls_parts(cross, x_parts, &comps)?;
    ratios.sigma2 = g.rss / dof;
    Ok(ratios)
}

/// Negative restricted log-profile likelihood (up to constants) of the
/// model with the given active components, at fixed variance ratios in
/// component order. This is the objective [`fit_reml`] minimizes; exposing
/// it lets grid-search oracles probe the same surface.
pub fn reml_objective(cross: &LayerCross, active: &[Component], ratios: &[f64]) -> Result<f64> {
    if active.len() != ratios.len() {
        return Err(Error::Config("one ratio per active component".into()));
    }
    let x_parts: &[usize] = if active.contains(&Component::Lambda) {
        &[0, 1, 2]
    } else if active.contains(&Component::Tau) {
        &[0, 1]
    } else {
        &[0]
    };
    let rank: usize = x_parts.iter().map(|&part| cross.p[part]).sum();
    let dof = (cross.n - rank) as f64;
    let comps: Vec<(Component, f64)> = active.iter().cloned().zip(ratios.iter().cloned()).collect();
    let g = gls_parts(cross, x_parts, &comps)?;
    if g.rss <= 0.0 {
        return Err(Error::Numerical("nonpositive generalized RSS".into()));
    }
    Ok(dof * g.rss.ln() + g.logdet_v + g.logdet_xvx)
}

/// Testing stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Carryover under the full model.
    S1,
    /// Treatment under the full model.
    S2a,
    /// Treatment under the reduced (no-carryover) model.
    S2b,
}

impl Stage {
    pub fn target(self) -> Component {
        match self {
            Stage::S1 => Component::Lambda,
            Stage::S2a | Stage::S2b => Component::Tau,
        }
    }

    pub fn nuisance(self) -> &'static [Component] {
        match self {
            Stage::S1 => &[Component::Mu, Component::Tau],
            Stage::S2a => &[Component::Mu, Component::Lambda],
            Stage::S2b => &[Component::Mu],
        }
    }

    /// X blocks of the stage's encompassing model.
    fn x_parts(self) -> &'static [usize] {
        match self {
            Stage::S1 | Stage::S2a => &[0, 1, 2],
            Stage::S2b => &[0, 1],
        }
    }
}

/// Dimensions entering a stage's null distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDims {
    pub n: usize,
    /// Rank of the stage's fixed design (full rank for S1/S2a, reduced for S2b).
    pub rank: usize,
    pub q_target: usize,
    pub h_target: usize,
}

/// The pqGF statistic of one stage, with the REML ratios it used.
pub fn pqgf_statistic(
    cross: &LayerCross,
    stage: Stage,
    full_fit: &VarianceRatios,
    reduced_fit: Option<&VarianceRatios>,
) -> Result<(f64, VarianceRatios)> {
    let n = cross.n as f64;
    match stage {
        Stage::S1 => {
            let qrss_full = compute_qrss(cross, QrssVariant::Full, full_fit)?;
            let qrss_null = compute_qrss(cross, QrssVariant::NullStage1, full_fit)?;
            Ok((n * (qrss_null - qrss_full) / qrss_full, *full_fit))
        }
        Stage::S2a => {
            let qrss_full = compute_qrss(cross, QrssVariant::Full, full_fit)?;
            let qrss_null = compute_qrss(cross, QrssVariant::NullStage2a, full_fit)?;
            Ok((n * (qrss_null - qrss_full) / qrss_full, *full_fit))
        }
        Stage::S2b => {
            let fit = reduced_fit
                .ok_or_else(|| Error::Config("stage 2b needs the reduced-model fit".into()))?;
            let qrss_reduced = compute_qrss(cross, QrssVariant::ReducedNoLambda, fit)?;
            let qrss_null = compute_qrss(cross, QrssVariant::NullStage2b, fit)?;
            Ok((n * (qrss_null - qrss_reduced) / qrss_reduced, *fit))
        }
    }
}

/// Evaluator of the stage's nuisance-dependent eigenvalue structures.
///
/// `eval` fills the target eigenvalues (descending) at a nuisance ratio
/// point and returns the omega log-penalty
/// `sum_s log(1 + omega_s(theta))`.
pub trait NuisanceEval: Sync {
    fn n_nuisance(&self) -> usize;
    fn q_target(&self) -> usize;
    fn eval(&self, theta: &[f64], xi: &mut [f64]) -> f64;
}

/// Exact structure: every evaluation assembles the target matrix through the
/// cached `B = Z'(I - P_X)Z` blocks and takes its eigenvalues.
#[derive(Debug, Clone)]
pub struct StageStructure {
    /// `B` over `[target | nuisance...]` column blocks.
    b: DMatrix<f64>,
    q_target: usize,
    nuisance_sizes: Vec<usize>,
}

impl StageStructure {
    /// Build the stage's structure from the layer cross products.
    pub fn new(cross: &LayerCross, stage: Stage) -> Result<Self> {
        let x_idx: Vec<usize> = stage
            .x_parts()
            .iter()
            .flat_map(|&part| cross.x_range(part))
            .collect();
        let r = x_idx.len();
        let mut z_idx: Vec<usize> = cross.z_range(stage.target()).collect();
        let mut nuisance_sizes = Vec::new();
        for &c in stage.nuisance() {
            let range = cross.z_range(c);
            nuisance_sizes.push(range.len());
            z_idx.extend(range);
        }
        let qt = z_idx.len();

        let xtx = DMatrix::from_fn(r, r, |a, b| cross.xtx[(x_idx[a], x_idx[b])]);
        let ztx = DMatrix::from_fn(qt, r, |a, b| cross.ztx[(z_idx[a], x_idx[b])]);
        let ztz = DMatrix::from_fn(qt, qt, |a, b| cross.ztz[(z_idx[a], z_idx[b])]);
        let chol = Cholesky::new(xtx)
            .ok_or_else(|| Error::Numerical("stage fixed design is singular".into()))?;
        let mut b = &ztz - &ztx * chol.solve(&ztx.transpose());
        // Symmetrize; the assembly is symmetric up to rounding.
        for i in 0..qt {
            for j in 0..i {
                let v = (b[(i, j)] + b[(j, i)]) / 2.0;
                b[(i, j)] = v;
                b[(j, i)] = v;
            }
        }
        Ok(StageStructure {
            b,
            q_target: cross.q[stage.target().index()],
            nuisance_sizes,
        })
    }

    /// Target-block eigenvalues at a nuisance point, by explicit assembly.
    fn xi_at(&self, theta: &[f64], xi: &mut [f64]) {
        let qt = self.q_target;
        let k: usize = self.nuisance_sizes.iter().sum();
        let b_tt = self.b.view((0, 0), (qt, qt));
        let mut s = b_tt.into_owned();
        // Active nuisance columns.
        let mut d_diag = Vec::with_capacity(k);
        for (size, &ratio) in self.nuisance_sizes.iter().zip(theta.iter()) {
            for _ in 0..*size {
                d_diag.push(ratio);
            }
        }
        let active: Vec<usize> = (0..k).filter(|&j| d_diag[j] > 0.0).collect();
        if !active.is_empty() {
            let ka = active.len();
            let b_tu = DMatrix::from_fn(qt, ka, |a, j| self.b[(a, qt + active[j])]);
            let mut m = DMatrix::from_fn(ka, ka, |a, b| {
                self.b[(qt + active[a], qt + active[b])]
            });
            for (j, &col) in active.iter().enumerate() {
                m[(j, j)] += 1.0 / d_diag[col];
            }
            if let Some(chol) = Cholesky::new(m) {
                s -= &b_tu * chol.solve(&b_tu.transpose());
            }
        }
        for i in 0..qt {
            for j in 0..i {
                let v = (s[(i, j)] + s[(j, i)]) / 2.0;
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(s);
        let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        xi.copy_from_slice(&vals);
    }

    /// `sum_s log(1 + omega_s(theta)) = log det(I + D^{1/2} B_UU D^{1/2})`.
    fn omega_penalty(&self, theta: &[f64]) -> f64 {
        let qt = self.q_target;
        let k: usize = self.nuisance_sizes.iter().sum();
        let mut d_diag = Vec::with_capacity(k);
        for (size, &ratio) in self.nuisance_sizes.iter().zip(theta.iter()) {
            for _ in 0..*size {
                d_diag.push(ratio.max(0.0));
            }
        }
        let mut m = DMatrix::from_fn(k, k, |a, b| {
            (d_diag[a] * d_diag[b]).sqrt() * self.b[(qt + a, qt + b)]
        });
        for i in 0..k {
            m[(i, i)] += 1.0;
        }
        match Cholesky::new(m) {
            Some(chol) => chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum(),
            None => f64::INFINITY,
        }
    }
}

impl NuisanceEval for StageStructure {
    fn n_nuisance(&self) -> usize {
        self.nuisance_sizes.len()
    }

    fn q_target(&self) -> usize {
        self.q_target
    }

    fn eval(&self, theta: &[f64], xi: &mut [f64]) -> f64 {
        self.xi_at(theta, xi);
        self.omega_penalty(theta)
    }
}

/// Stage eigenvalue lists at one nuisance point, for inspection and tests.
pub fn eigenvalue_structures(
    cross: &LayerCross,
    stage: Stage,
    ratios: &VarianceRatios,
) -> Result<(Vec<f64>, f64)> {
    let structure = StageStructure::new(cross, stage)?;
    let theta: Vec<f64> = stage.nuisance().iter().map(|&c| ratios.get(c)).collect();
    let mut xi = vec![0.0; structure.q_target()];
    let pen = structure.eval(&theta, &mut xi);
    Ok((xi, pen))
}

/// Interpolated nuisance surfaces: eigenvalues and omega penalty live on a
/// log-dense `ln(1+ratio)` lattice and are bilinearly interpolated. Lattice
/// nodes are computed lazily on first touch and cached, so only the region
/// the inner optimizers actually visit is ever assembled. This is the
/// default inside Monte Carlo loops; accuracy against the exact structure
/// is pinned in the test suite.
pub struct GriddedStructure {
    exact: StageStructure,
    /// Node positions in `t = ln(1 + ratio)`, ascending, log-dense in ratio.
    nodes_t: Vec<f64>,
    values: Vec<std::sync::OnceLock<(Vec<f64>, f64)>>,
    dims: usize,
}

impl GriddedStructure {
    pub fn new(exact: StageStructure) -> Self {
        let dims = exact.n_nuisance();
        // ratio nodes: 0, then six per decade from 1e-6 to 1e4.
        let per_decade = if dims == 1 { 12 } else { 6 };
        let mut nodes_t = vec![0.0];
        let mut k = 0;
        loop {
            let ratio = 1e-6 * 10f64.powf(k as f64 / per_decade as f64);
            if ratio > 1e4 * 1.0001 {
                break;
            }
            nodes_t.push(ratio.ln_1p());
            k += 1;
        }
        let total = nodes_t.len().pow(dims as u32);
        let mut values = Vec::with_capacity(total);
        values.resize_with(total, std::sync::OnceLock::new);
        GriddedStructure {
            exact,
            nodes_t,
            values,
            dims,
        }
    }

    fn node(&self, idx: &[usize]) -> &(Vec<f64>, f64) {
        let m = self.nodes_t.len();
        let flat = idx.iter().fold(0usize, |acc, &i| acc * m + i);
        self.values[flat].get_or_init(|| {
            let theta: Vec<f64> = idx.iter().map(|&i| self.nodes_t[i].exp_m1()).collect();
            let mut xi = vec![0.0; self.exact.q_target()];
            let pen = self.exact.eval(&theta, &mut xi);
            (xi, pen)
        })
    }

    /// Cell index and fraction of `t` in the nonuniform node array.
    fn locate(&self, t: f64) -> (usize, f64) {
        let m = self.nodes_t.len();
        let t = t.clamp(0.0, self.nodes_t[m - 1]);
        let hi = self.nodes_t.partition_point(|&x| x <= t).min(m - 1).max(1);
        let lo = hi - 1;
        let width = self.nodes_t[hi] - self.nodes_t[lo];
        (lo, ((t - self.nodes_t[lo]) / width).clamp(0.0, 1.0))
    }
}

impl NuisanceEval for GriddedStructure {
    fn n_nuisance(&self) -> usize {
        self.dims
    }

    fn q_target(&self) -> usize {
        self.exact.q_target()
    }

    fn eval(&self, theta: &[f64], xi: &mut [f64]) -> f64 {
        match self.dims {
            1 => {
                let (i, f) = self.locate(theta[0].ln_1p());
                let (xa, pa) = self.node(&[i]);
                let (xb, pb) = self.node(&[i + 1]);
                for (k, x) in xi.iter_mut().enumerate() {
                    *x = xa[k] * (1.0 - f) + xb[k] * f;
                }
                pa * (1.0 - f) + pb * f
            }
            2 => {
                let (i, fi) = self.locate(theta[0].ln_1p());
                let (j, fj) = self.locate(theta[1].ln_1p());
                let w00 = (1.0 - fi) * (1.0 - fj);
                let w10 = fi * (1.0 - fj);
                let w01 = (1.0 - fi) * fj;
                let w11 = fi * fj;
                let (t00, p00) = self.node(&[i, j]);
                let (t10, p10) = self.node(&[i + 1, j]);
                let (t01, p01) = self.node(&[i, j + 1]);
                let (t11, p11) = self.node(&[i + 1, j + 1]);
                for (k, x) in xi.iter_mut().enumerate() {
                    *x = t00[k] * w00 + t10[k] * w10 + t01[k] * w01 + t11[k] * w11;
                }
                p00 * w00 + p10 * w10 + p01 * w01 + p11 * w11
            }
            d => unreachable!("unsupported nuisance dimension {d}"),
        }
    }
}

/// Stage dims from a whitened problem.
pub fn stage_dims(problem: &ProjectedLmmProblem, stage: Stage) -> StageDims {
    let rank = match stage {
        Stage::S1 | Stage::S2a => problem.fixed_rank(),
        Stage::S2b => problem.reduced_rank(),
    };
    let (q_target, h_target) = match stage.target() {
        Component::Tau => (problem.z_tau.ncols(), problem.degrees.tau),
        Component::Lambda => (problem.z_lambda.ncols(), problem.degrees.lambda),
        Component::Mu => (problem.z_mu.ncols(), problem.degrees.mu),
    };
    StageDims {
        n: problem.n_rows(),
        rank,
        q_target,
        h_target,
    }
}
