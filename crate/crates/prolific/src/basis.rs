//! Spline bases: clamped B-splines for the bivariate mean model and the
//! truncated polynomial basis for the projected mixed models, plus the
//! quantile-based knot rule shared by both treatment and carryover splines.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Clamped B-spline basis on `[0, 1]` with equidistant interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    degree: usize,
    /// Full knot vector including repeated boundary knots.
    knots: Vec<f64>,
    n_basis: usize,
}

impl BSplineBasis {
    /// Cubic basis with `n_interior` equidistant interior knots.
    pub fn cubic(n_interior: usize) -> Self {
        Self::new(3, n_interior)
    }

    pub fn new(degree: usize, n_interior: usize) -> Self {
        let mut knots = vec![0.0; degree + 1];
        for i in 1..=n_interior {
            knots.push(i as f64 / (n_interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        BSplineBasis {
            degree,
            n_basis: n_interior + degree + 1,
            knots,
        }
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Index of the knot span containing `x` (clamped to `[0, 1]`).
    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let high = self.knots.len() - p - 2;
        if x >= 1.0 {
            return high;
        }
        let mut lo = p;
        let mut hi = high;
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.knots[mid] <= x {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// The `degree + 1` non-zero basis values at `x`, together with the index
    /// of the first non-zero basis function.
    pub fn eval_local(&self, x: f64) -> (usize, Vec<f64>) {
        let x = x.clamp(0.0, 1.0);
        let p = self.degree;
        let span = self.span(x);
        let mut values = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { values[r] / denom };
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        (span - p, values)
    }

    /// Dense basis row at `x`.
    pub fn eval_dense(&self, x: f64) -> Vec<f64> {
        let (offset, local) = self.eval_local(x);
        let mut row = vec![0.0; self.n_basis];
        row[offset..offset + local.len()].copy_from_slice(&local);
        row
    }

    /// Second-order difference penalty on the coefficients.
    pub fn second_difference_penalty(&self) -> nalgebra::DMatrix<f64> {
        let m = self.n_basis;
        let mut p = nalgebra::DMatrix::zeros(m, m);
        for i in 0..m.saturating_sub(2) {
            let row = [(i, 1.0), (i + 1, -2.0), (i + 2, 1.0)];
            for &(a, va) in &row {
                for &(b, vb) in &row {
                    p[(a, b)] += va * vb;
                }
            }
        }
        p
    }
}

/// Truncated polynomial basis `(1, d, ..., d^h, (d - k_1)_+^h, ..., (d - k_Q)_+^h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedPolyBasis {
    pub degree: usize,
    pub knots: Vec<f64>,
}

impl TruncatedPolyBasis {
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Config("truncated basis needs at least one knot".into()));
        }
        for w in knots.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("knots must be strictly increasing".into()));
            }
        }
        if knots[0] <= 0.0 || *knots.last().unwrap() >= 1.0 {
            return Err(Error::Config("knots must be interior to (0, 1)".into()));
        }
        Ok(TruncatedPolyBasis { degree, knots })
    }

    pub fn n_fixed(&self) -> usize {
        self.degree + 1
    }

    pub fn n_random(&self) -> usize {
        self.knots.len()
    }

    /// Fixed (polynomial) and random (truncated) parts of the design row for
    /// one day, both multiplied by the 0/1 indicator.
    pub fn row(&self, day: f64, indicator: bool) -> (Vec<f64>, Vec<f64>) {
        let ind = if indicator { 1.0 } else { 0.0 };
        let mut fixed = Vec::with_capacity(self.n_fixed());
        let mut power = 1.0;
        for _ in 0..=self.degree {
            fixed.push(ind * power);
            power *= day;
        }
        let random = self
            .knots
            .iter()
            .map(|&k| {
                let t = (day - k).max(0.0);
                ind * t.powi(self.degree as i32)
            })
            .collect();
        (fixed, random)
    }
}

/// Knot-count rule: `Q = max(q_min, min(factor * #unique, q_max))`, capped at
/// `#unique - 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnotRule {
    pub q_min: usize,
    pub q_max: usize,
    pub factor: f64,
}

impl Default for KnotRule {
    fn default() -> Self {
        KnotRule {
            q_min: 20,
            q_max: 40,
            factor: 0.25,
        }
    }
}

/// Place knots at equally spaced quantile levels of the observed days.
pub fn choose_knots(days: &[f64], rule: &KnotRule) -> Result<Vec<f64>> {
    let mut sorted: Vec<f64> = days.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut unique = sorted.clone();
    unique.dedup();
    if unique.len() < 3 {
        return Err(Error::validation(format!(
            "knot placement needs at least 3 unique days, got {}",
            unique.len()
        )));
    }

    let q_raw = ((rule.factor * unique.len() as f64).floor() as usize).min(rule.q_max);
    let q = rule.q_min.max(q_raw).min(unique.len() - 2);

    // Type-7 quantiles of the day multiset at levels q / (Q + 1).
    let n = sorted.len();
    let mut knots = Vec::with_capacity(q);
    for j in 1..=q {
        let level = j as f64 / (q + 1) as f64;
        let h = level * (n - 1) as f64;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        let value = if lo + 1 < n {
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        } else {
            sorted[n - 1]
        };
        knots.push(value);
    }

    // Nudge ties apart and keep knots interior.
    for j in 1..knots.len() {
        if knots[j] <= knots[j - 1] {
            knots[j] = knots[j - 1] + 1e-9;
        }
    }
    let eps = 1e-9;
    for k in knots.iter_mut() {
        *k = k.clamp(eps, 1.0 - eps);
    }
    for j in 1..knots.len() {
        if knots[j] <= knots[j - 1] {
            knots[j] = knots[j - 1] + 1e-9;
        }
    }
    if *knots.last().unwrap() >= 1.0 {
        return Err(Error::validation("could not place interior knots"));
    }
    Ok(knots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bspline_partition_of_unity() {
        let basis = BSplineBasis::cubic(7);
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            let row = basis.eval_dense(x);
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|&v| v >= -1e-14));
        }
    }

    #[test]
    fn bspline_local_support_width() {
        let basis = BSplineBasis::cubic(10);
        let (_, local) = basis.eval_local(0.37);
        assert_eq!(local.len(), 4);
        let dense = basis.eval_dense(0.37);
        assert_eq!(dense.iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn truncated_row_examples() {
        let basis = TruncatedPolyBasis::new(1, vec![0.5]).unwrap();
        let (fixed, random) = basis.row(0.75, true);
        assert_eq!(fixed, vec![1.0, 0.75]);
        assert_abs_diff_eq!(random[0], 0.25, epsilon = 1e-15);

        // Indicator annihilates the whole row.
        let (fixed, random) = basis.row(0.75, false);
        assert!(fixed.iter().all(|&v| v == 0.0));
        assert!(random.iter().all(|&v| v == 0.0));

        // Below the knot the truncated part is zero.
        let (_, random) = basis.row(0.25, true);
        assert_eq!(random[0], 0.0);
    }

    #[test]
    fn truncated_row_is_continuous_at_the_knot() {
        let basis = TruncatedPolyBasis::new(1, vec![0.5]).unwrap();
        let (_, at) = basis.row(0.5, true);
        assert_eq!(at[0], 0.0);
        let (_, just_above) = basis.row(0.5 + 1e-9, true);
        assert!(just_above[0] < 1e-8);
    }

    #[test]
    fn knot_counts_follow_the_rule() {
        let rule = KnotRule::default();
        let days: Vec<f64> = (0..200).map(|i| i as f64 / 200.0 + 1e-4).collect();
        assert_eq!(choose_knots(&days, &rule).unwrap().len(), 40);

        let days: Vec<f64> = (0..60).map(|i| i as f64 / 60.0 + 1e-4).collect();
        assert_eq!(choose_knots(&days, &rule).unwrap().len(), 20);

        let days: Vec<f64> = (0..10).map(|i| i as f64 / 10.0 + 1e-4).collect();
        assert_eq!(choose_knots(&days, &rule).unwrap().len(), 8);

        let days = vec![0.1, 0.1, 0.2];
        assert!(choose_knots(&days, &rule).is_err());
    }

    #[test]
    fn knots_are_interior_and_increasing() {
        let rule = KnotRule::default();
        let days: Vec<f64> = (0..50).map(|i| (i % 10) as f64 / 10.0).collect();
        let knots = choose_knots(&days, &rule).unwrap();
        assert!(knots[0] > 0.0 && *knots.last().unwrap() < 1.0);
        for w in knots.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn penalty_annihilates_linear_coefficients() {
        let basis = BSplineBasis::cubic(5);
        let p = basis.second_difference_penalty();
        let linear: Vec<f64> = (0..basis.n_basis()).map(|i| 0.3 + 0.2 * i as f64).collect();
        let v = nalgebra::DVector::from_vec(linear);
        let q = (&p * &v).norm();
        assert_abs_diff_eq!(q, 0.0, epsilon = 1e-12);
    }
}
