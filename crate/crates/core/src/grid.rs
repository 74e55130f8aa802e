//! Collocation grids on `[-1, 1]` with differentiation matrices, quadrature
//! weights and interpolation to off-grid points.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::linalg::Matrix;
use crate::math::{self, PI};

/// Smallest grid accepted by [`build_grid`].
pub const MIN_POINTS: usize = 3;

/// Uniform stencils use this many points for first derivatives (5) and up to
/// one more for second-derivative closures, so uniform operators need at
/// least this many nodes.
pub const MIN_UNIFORM_OPERATOR_POINTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridKind {
    Uniform,
    /// Chebyshev–Gauss–Lobatto nodes `-cos(πk/(n-1))`.
    Chebyshev,
}

/// Strictly increasing abscissae on `[-1, 1]` including both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    kind: GridKind,
}

pub fn build_grid(n: usize, kind: GridKind) -> Result<Grid> {
    if n < MIN_POINTS {
        return Err(config_err(alloc::format!(
            "grid needs at least {MIN_POINTS} points, got {n}"
        )));
    }
    let last = (n - 1) as f64;
    let points = match kind {
        GridKind::Uniform => (0..n)
            .map(|k| {
                // Mirror the formula around the midpoint so the grid is exactly symmetric.
                if 2 * k < n - 1 {
                    -1.0 + 2.0 * k as f64 / last
                } else {
                    1.0 - 2.0 * (n - 1 - k) as f64 / last
                }
            })
            .collect(),
        // -cos(πk/N) written as a sine so the nodes are antisymmetric to the last bit.
        GridKind::Chebyshev => (0..n)
            .map(|k| math::sin(PI * (2.0 * k as f64 - last) / (2.0 * last)))
            .collect(),
    };
    Ok(Grid { points, kind })
}

impl Grid {
    #[inline]
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn kind(&self) -> GridKind {
        self.kind
    }

    /// Sample `f` at every grid point.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.points.iter().map(|&x| f(x)).collect()
    }

    /// Matrix mapping grid values to values at `targets` (rows = targets).
    ///
    /// Chebyshev grids use global barycentric interpolation; uniform grids use
    /// local degree-5 Lagrange interpolation on the six nearest nodes.
    pub fn interpolation_matrix(&self, targets: &[f64]) -> Result<Matrix> {
        let n = self.len();
        let mut m = Matrix::zeros(targets.len(), n);
        for (row, &x) in targets.iter().enumerate() {
            if !(-1.0..=1.0).contains(&x) {
                return Err(config_err(alloc::format!(
                    "interpolation target {x} outside [-1, 1]"
                )));
            }
            match self.kind {
                GridKind::Chebyshev => {
                    let w = chebyshev_barycentric_weights(n);
                    if let Some(j) = self.points.iter().position(|&p| p == x) {
                        m[(row, j)] = 1.0;
                        continue;
                    }
                    let terms: Vec<f64> = (0..n).map(|j| w[j] / (x - self.points[j])).collect();
                    let denom: f64 = terms.iter().sum();
                    for (j, t) in terms.iter().enumerate() {
                        m[(row, j)] = t / denom;
                    }
                }
                GridKind::Uniform => {
                    let width = n.min(6);
                    let h = 2.0 / (n - 1) as f64;
                    let nearest = (libm::round((x + 1.0) / h) as usize).min(n - 1);
                    let start = nearest.saturating_sub(width / 2).min(n - width);
                    let window = &self.points[start..start + width];
                    let w = fornberg_weights(x, window, 0, h);
                    for (k, c) in w.iter().enumerate() {
                        m[(row, start + k)] = c[0];
                    }
                }
            }
        }
        Ok(m)
    }
}

/// Square matrix mapping grid values of `f` to grid values of `f^(order)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffOperator {
    order: usize,
    matrix: Matrix,
}

impl DiffOperator {
    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Rows sum to zero, so the product is formed as `Σ_j D_ij (f_j − f_i)`,
    /// which annihilates constants exactly.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let n = self.matrix.rows();
        (0..n)
            .map(|i| {
                let fi = values[i];
                self.matrix
                    .row(i)
                    .iter()
                    .zip(values)
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, (d, f))| d * (f - fi))
                    .sum()
            })
            .collect()
    }

    /// Applies the operator to every column of `m`.
    pub fn apply_columns(&self, m: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for j in 0..m.cols() {
            out.set_column(j, &self.apply(&m.column(j)));
        }
        out
    }
}

/// First or second derivative operator on `grid`.
///
/// Chebyshev grids get the spectral collocation matrix (the second derivative
/// built directly, not as `D·D`). Uniform grids get fourth-order finite
/// differences: centered in the interior, one-sided of the same order at the
/// boundary.
pub fn diff_operator(grid: &Grid, order: usize) -> Result<DiffOperator> {
    if !(1..=2).contains(&order) {
        return Err(config_err(alloc::format!(
            "unsupported derivative order {order}, expected 1 or 2"
        )));
    }
    let matrix = match grid.kind {
        GridKind::Chebyshev => {
            let d1 = chebyshev_d1(grid);
            if order == 1 {
                d1
            } else {
                chebyshev_d2(grid, &d1)
            }
        }
        GridKind::Uniform => uniform_fd(grid, order)?,
    };
    Ok(DiffOperator { order, matrix })
}

fn chebyshev_barycentric_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == n - 1 {
                0.5 * s
            } else {
                s
            }
        })
        .collect()
}

fn chebyshev_d1(grid: &Grid) -> Matrix {
    let n = grid.len();
    let big_n = (n - 1) as f64;
    let w = chebyshev_barycentric_weights(n);
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            // x_i - x_j via the product formula avoids cancellation between close nodes.
            let dx = 2.0
                * math::sin(PI * (i + j) as f64 / (2.0 * big_n))
                * math::sin(PI * (i as f64 - j as f64) / (2.0 * big_n));
            let v = (w[j] / w[i]) / dx;
            d[(i, j)] = v;
            diag -= v;
        }
        d[(i, i)] = diag;
    }
    d
}

fn chebyshev_d2(grid: &Grid, d1: &Matrix) -> Matrix {
    let n = grid.len();
    let big_n = (n - 1) as f64;
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = 2.0
                * math::sin(PI * (i + j) as f64 / (2.0 * big_n))
                * math::sin(PI * (i as f64 - j as f64) / (2.0 * big_n));
            let v = 2.0 * d1[(i, j)] * (d1[(i, i)] - 1.0 / dx);
            d[(i, j)] = v;
            diag -= v;
        }
        d[(i, i)] = diag;
    }
    d
}

fn uniform_fd(grid: &Grid, order: usize) -> Result<Matrix> {
    let n = grid.len();
    if n < MIN_UNIFORM_OPERATOR_POINTS {
        return Err(config_err(alloc::format!(
            "uniform difference operators need at least {MIN_UNIFORM_OPERATOR_POINTS} points, got {n}"
        )));
    }
    let h = 2.0 / (n - 1) as f64;
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        let centered = i >= 2 && i + 2 < n;
        let width = if order == 2 && !centered { 6 } else { 5 };
        let start = i.saturating_sub(2).min(n - width);
        let window = &grid.points[start..start + width];
        let w = fornberg_weights(grid.points[i], window, order, h);
        let mut off_diag = 0.0;
        for (k, c) in w.iter().enumerate() {
            if start + k != i {
                d[(i, start + k)] = c[order];
                off_diag += c[order];
            }
        }
        d[(i, i)] = -off_diag;
    }
    Ok(d)
}

/// Finite-difference weights for derivatives `0..=max_order` at `z` using
/// `nodes`; entry `[k][m]` weighs node `k` for derivative `m`. `scale` is a
/// typical node spacing used to keep the recursion well-conditioned.
fn fornberg_weights(z: f64, nodes: &[f64], max_order: usize, scale: f64) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let x: Vec<f64> = nodes.iter().map(|&p| (p - z) / scale).collect();
    let mut c = vec![vec![0.0; max_order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = x[0];
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i];
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    for row in &mut c {
        for (m, v) in row.iter_mut().enumerate() {
            *v /= math::powi(scale, m as i32);
        }
    }
    c
}

/// Nonnegative quadrature weights summing to the length of `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    weights: Vec<f64>,
}

impl Quadrature {
    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ w_j f_j`.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        crate::linalg::dot(&self.weights, values)
    }

    /// Quadrature-weighted L² norm `sqrt(Σ w_j f_j²)`.
    pub fn norm(&self, values: &[f64]) -> f64 {
        math::sqrt(
            self.weights
                .iter()
                .zip(values)
                .map(|(w, v)| w * v * v)
                .sum::<f64>(),
        )
    }
}

/// Trapezoid weights on uniform grids, Clenshaw–Curtis on Chebyshev grids.
pub fn quadrature_weights(grid: &Grid) -> Quadrature {
    let n = grid.len();
    let weights = match grid.kind {
        GridKind::Uniform => {
            let h = 2.0 / (n - 1) as f64;
            (0..n)
                .map(|k| if k == 0 || k == n - 1 { 0.5 * h } else { h })
                .collect()
        }
        GridKind::Chebyshev => clenshaw_curtis(n),
    };
    Quadrature { weights }
}

fn clenshaw_curtis(n: usize) -> Vec<f64> {
    let big_n = n - 1;
    let nf = big_n as f64;
    let mut w = vec![0.0; n];
    let mut interior = vec![1.0; n.saturating_sub(2)];
    let theta = |k: usize| PI * k as f64 / nf;
    if big_n % 2 == 0 {
        w[0] = 1.0 / (nf * nf - 1.0);
        w[big_n] = w[0];
        for k in 1..big_n / 2 {
            let kk = k as f64;
            for (idx, v) in interior.iter_mut().enumerate() {
                *v -= 2.0 * math::cos(2.0 * kk * theta(idx + 1)) / (4.0 * kk * kk - 1.0);
            }
        }
        for (idx, v) in interior.iter_mut().enumerate() {
            *v -= math::cos(nf * theta(idx + 1)) / (nf * nf - 1.0);
        }
    } else {
        w[0] = 1.0 / (nf * nf);
        w[big_n] = w[0];
        for k in 1..=(big_n - 1) / 2 {
            let kk = k as f64;
            for (idx, v) in interior.iter_mut().enumerate() {
                *v -= 2.0 * math::cos(2.0 * kk * theta(idx + 1)) / (4.0 * kk * kk - 1.0);
            }
        }
    }
    for (idx, v) in interior.iter().enumerate() {
        w[idx + 1] = 2.0 * v / nf;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn uniform_three_points() {
        let g = build_grid(3, GridKind::Uniform).unwrap();
        assert_eq!(g.points(), &[-1.0, 0.0, 1.0]);
        assert_eq!(quadrature_weights(&g).weights(), &[0.5, 1.0, 0.5]);
    }

    #[test]
    fn chebyshev_five_points() {
        let g = build_grid(5, GridKind::Chebyshev).unwrap();
        let h = core::f64::consts::FRAC_1_SQRT_2;
        let expected = [-1.0, -h, 0.0, h, 1.0];
        assert!(max_abs_diff(g.points(), &expected) < 1e-15);
        assert_eq!(g.points()[0], -1.0);
        assert_eq!(g.points()[4], 1.0);
    }

    #[test]
    fn uniform_spacing() {
        let g = build_grid(7, GridKind::Uniform).unwrap();
        for w in g.points().windows(2) {
            assert!((w[1] - w[0] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn too_small_grid_rejected() {
        assert!(build_grid(2, GridKind::Chebyshev).is_err());
        let g = build_grid(5, GridKind::Uniform).unwrap();
        assert!(diff_operator(&g, 1).is_err());
    }

    #[test]
    fn unsupported_order_rejected() {
        let g = build_grid(9, GridKind::Chebyshev).unwrap();
        assert!(diff_operator(&g, 0).is_err());
        assert!(diff_operator(&g, 3).is_err());
    }

    #[test]
    fn constants_and_lines() {
        for kind in [GridKind::Uniform, GridKind::Chebyshev] {
            for n in [8, 17, 64, 257] {
                let g = build_grid(n, kind).unwrap();
                let d1 = diff_operator(&g, 1).unwrap();
                let d2 = diff_operator(&g, 2).unwrap();
                let c = vec![3.7; n];
                assert!(d1.apply(&c).iter().all(|v| v.abs() < 1e-12), "{kind:?} {n}");
                assert!(d2.apply(&c).iter().all(|v| v.abs() < 1e-12), "{kind:?} {n}");
                let ones = vec![1.0; n];
                assert!(max_abs_diff(&d1.apply(g.points()), &ones) < 1e-10, "{kind:?} {n}");
            }
        }
    }

    #[test]
    fn uniform_fourth_order_exactness() {
        let g = build_grid(21, GridKind::Uniform).unwrap();
        let d1 = diff_operator(&g, 1).unwrap();
        let d2 = diff_operator(&g, 2).unwrap();
        for k in 0..=4i32 {
            let f = g.sample(|x| math::powi(x, k));
            let df = g.sample(|x| if k == 0 { 0.0 } else { k as f64 * math::powi(x, k - 1) });
            let ddf = g.sample(|x| {
                if k < 2 {
                    0.0
                } else {
                    (k * (k - 1)) as f64 * math::powi(x, k - 2)
                }
            });
            assert!(max_abs_diff(&d1.apply(&f), &df) < 1e-10, "d1 x^{k}");
            assert!(max_abs_diff(&d2.apply(&f), &ddf) < 1e-8, "d2 x^{k}");
        }
    }

    #[test]
    fn chebyshev_spectral_derivatives() {
        let g = build_grid(256, GridKind::Chebyshev).unwrap();
        let d1 = diff_operator(&g, 1).unwrap();
        let f = g.sample(|x| math::sin(3.0 * x));
        let df = g.sample(|x| 3.0 * math::cos(3.0 * x));
        assert!(max_abs_diff(&d1.apply(&f), &df) < 1e-8);

        let g = build_grid(65, GridKind::Chebyshev).unwrap();
        let d2 = diff_operator(&g, 2).unwrap();
        let f = g.sample(|x| math::sin(3.0 * x));
        let ddf = g.sample(|x| -9.0 * math::sin(3.0 * x));
        assert!(max_abs_diff(&d2.apply(&f), &ddf) < 1e-8);
    }

    #[test]
    fn quadrature_sums_to_two() {
        for kind in [GridKind::Uniform, GridKind::Chebyshev] {
            for n in [3, 4, 8, 9, 128, 257, 513] {
                let q = quadrature_weights(&build_grid(n, kind).unwrap());
                let s: f64 = q.weights().iter().sum();
                assert!((s - 2.0).abs() < 1e-12, "{kind:?} {n}: {s}");
                assert!(q.weights().iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn clenshaw_curtis_polynomial_exactness() {
        for n in [8, 9, 128] {
            let g = build_grid(n, GridKind::Chebyshev).unwrap();
            let q = quadrature_weights(&g);
            for k in 0..n as i32 {
                let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
                let got = q.integrate(&g.sample(|x| math::powi(x, k)));
                assert!((got - exact).abs() < 1e-12 * exact.abs().max(1.0), "n={n} k={k}");
            }
        }
        let g = build_grid(128, GridKind::Chebyshev).unwrap();
        let got = quadrature_weights(&g).integrate(&g.sample(|x| x * x));
        assert!((got - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn trapezoid_exact_on_lines() {
        let g = build_grid(11, GridKind::Uniform).unwrap();
        let q = quadrature_weights(&g);
        assert!((q.integrate(&g.sample(|x| 2.0 * x + 1.0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn operators_are_deterministic() {
        for kind in [GridKind::Uniform, GridKind::Chebyshev] {
            let a = diff_operator(&build_grid(33, kind).unwrap(), 2).unwrap();
            let b = diff_operator(&build_grid(33, kind).unwrap(), 2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn interpolation_reproduces_smooth_functions() {
        let targets = [-0.97, -0.31, 0.0, 0.123, 0.8, 1.0];
        let g = build_grid(65, GridKind::Chebyshev).unwrap();
        let m = g.interpolation_matrix(&targets).unwrap();
        let got = m.matvec(&g.sample(|x| math::sin(4.0 * x)));
        let want: Vec<f64> = targets.iter().map(|&x| math::sin(4.0 * x)).collect();
        assert!(max_abs_diff(&got, &want) < 1e-12);

        let g = build_grid(201, GridKind::Uniform).unwrap();
        let m = g.interpolation_matrix(&targets).unwrap();
        let got = m.matvec(&g.sample(|x| math::sin(4.0 * x)));
        assert!(max_abs_diff(&got, &want) < 1e-8);
        assert!(g.interpolation_matrix(&[1.5]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn differentiation_is_linear_and_kills_affine_functions(
            n in 6usize..80,
            chebyshev in proptest::prelude::any::<bool>(),
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let kind = if chebyshev { GridKind::Chebyshev } else { GridKind::Uniform };
            let g = build_grid(n, kind).unwrap();
            let d1 = diff_operator(&g, 1).unwrap();
            let d2 = diff_operator(&g, 2).unwrap();
            let line = g.sample(|x| a * x + b);
            proptest::prop_assert!(max_abs_diff(&d1.apply(&line), &vec![a; n]) < 1e-9 * (1.0 + a.abs()));
            proptest::prop_assert!(d2.apply(&line).iter().all(|v| v.abs() < 1e-7 * (1.0 + a.abs() + b.abs())));
        }
    }
}
