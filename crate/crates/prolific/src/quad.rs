//! Quadrature helpers on a fixed sampling grid.

/// Trapezoid weights for an ascending grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    assert!(n >= 2, "quadrature needs at least two grid points");
    let mut w = vec![0.0; n];
    for r in 0..n {
        if r == 0 {
            w[r] = (grid[1] - grid[0]) / 2.0;
        } else if r == n - 1 {
            w[r] = (grid[n - 1] - grid[n - 2]) / 2.0;
        } else {
            w[r] = (grid[r + 1] - grid[r - 1]) / 2.0;
        }
    }
    w
}

/// Trapezoid integral of sampled values over the grid.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    assert_eq!(grid.len(), values.len());
    let mut acc = 0.0;
    for r in 0..grid.len() - 1 {
        acc += (grid[r + 1] - grid[r]) * (values[r] + values[r + 1]) / 2.0;
    }
    acc
}

/// Trapezoid inner product `∫ f g` of two sampled functions.
pub fn inner_product(weights: &[f64], f: &[f64], g: &[f64]) -> f64 {
    debug_assert_eq!(weights.len(), f.len());
    debug_assert_eq!(weights.len(), g.len());
    weights
        .iter()
        .zip(f.iter().zip(g.iter()))
        .map(|(w, (a, b))| w * a * b)
        .sum()
}

/// Composite Simpson integral of `f` over `[a, b]` with `2m` panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, m: usize) -> f64 {
    let n = 2 * m.max(1);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        acc += if i % 2 == 0 { 2.0 * f(x) } else { 4.0 * f(x) };
    }
    acc * h / 3.0
}
