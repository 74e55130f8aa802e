//! Snapshot assembly and proper orthogonal decomposition.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::grid::{diff_operator, Grid};
use crate::linalg::{axpy, dot, norm2, Matrix};
use crate::math;
use crate::problems::Problem;

/// Column-wise snapshots `S` (`n × n_s`) and the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub grid: Grid,
    pub params: Vec<Vec<f64>>,
    pub values: Matrix,
    /// Exact first and second spatial derivatives of the snapshots, when known.
    pub derivatives: Option<(Matrix, Matrix)>,
}

impl SnapshotSet {
    /// Wraps existing data, validating shapes and finiteness.
    pub fn new(grid: Grid, params: Vec<Vec<f64>>, values: Matrix) -> Result<Self> {
        if values.rows() != grid.len() || values.cols() != params.len() {
            return Err(config_err(alloc::format!(
                "snapshot matrix is {}x{}, expected {}x{}",
                values.rows(),
                values.cols(),
                grid.len(),
                params.len()
            )));
        }
        if values.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("snapshot matrix has non-finite entries".into()));
        }
        Ok(Self {
            grid,
            params,
            values,
            derivatives: None,
        })
    }

    /// Attaches exact derivative snapshots `(S_x, S_xx)`, same shape as `S`.
    pub fn with_derivatives(mut self, dx: Matrix, dxx: Matrix) -> Result<Self> {
        for m in [&dx, &dxx] {
            if m.rows() != self.values.rows() || m.cols() != self.values.cols() {
                return Err(config_err("derivative snapshots must match the snapshot shape"));
            }
            if m.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("derivative snapshots have non-finite entries".into()));
            }
        }
        self.derivatives = Some((dx, dxx));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

pub fn assemble_snapshots(
    problem: &dyn Problem,
    grid: &Grid,
    params: &[Vec<f64>],
) -> Result<SnapshotSet> {
    let (n, ns) = (grid.len(), params.len());
    let mut values = Matrix::zeros(n, ns);
    let mut dx = Matrix::zeros(n, ns);
    let mut dxx = Matrix::zeros(n, ns);
    for (j, mu) in params.iter().enumerate() {
        problem.check_mu(mu)?;
        for (i, &x) in grid.points().iter().enumerate() {
            let jet = problem.solution(x, mu);
            values[(i, j)] = jet.u;
            dx[(i, j)] = jet.ux;
            dxx[(i, j)] = jet.uxx;
        }
    }
    SnapshotSet::new(grid.clone(), params.to_vec(), values)?.with_derivatives(dx, dxx)
}

/// Leading left singular vectors of a snapshot matrix and their derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    /// `n × ℓ`, orthonormal columns `ψ_i`.
    pub basis: Matrix,
    /// `n × ℓ`, columns `ψ_i'`.
    pub basis_dx: Matrix,
    /// `n × ℓ`, columns `ψ_i''`.
    pub basis_dxx: Matrix,
    /// All singular values of the snapshot matrix, nonincreasing.
    pub singular_values: Vec<f64>,
}

impl ReducedBasis {
    pub fn ell(&self) -> usize {
        self.basis.cols()
    }

    pub fn n(&self) -> usize {
        self.basis.rows()
    }

    /// `B_rᵀ f`: coefficients of the Euclidean projection onto the first `r` vectors.
    pub fn project(&self, r: usize, field: &[f64]) -> Result<Vec<f64>> {
        project(self, r, field)
    }

    /// `B_r c`.
    pub fn expand(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        let r = coeffs.len();
        self.check_r(r)?;
        let mut out = vec![0.0; self.n()];
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.basis.row(i)[..r], coeffs);
        }
        Ok(out)
    }

    /// Number of leading modes with `σ_i > rel_tol · σ_1`, capped at `ℓ`.
    ///
    /// Modes below roughly `1e-10 σ_1` are rounding noise of the snapshots and
    /// carry no usable derivative information.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values
            .iter()
            .take(self.ell())
            .take_while(|&&s| s > rel_tol * top)
            .count()
    }

    /// The first `ell` modes.
    pub fn truncated(&self, ell: usize) -> Result<Self> {
        if ell == 0 {
            return Err(config_err("cannot truncate a basis to zero modes"));
        }
        self.check_r(ell)?;
        Ok(Self {
            basis: self.basis.leading_columns(ell),
            basis_dx: self.basis_dx.leading_columns(ell),
            basis_dxx: self.basis_dxx.leading_columns(ell),
            singular_values: self.singular_values.clone(),
        })
    }

    fn check_r(&self, r: usize) -> Result<()> {
        if r > self.ell() {
            return Err(config_err(alloc::format!(
                "requested {r} basis functions but only {} are available",
                self.ell()
            )));
        }
        Ok(())
    }
}

/// SVD of the snapshot matrix; keeps the first `ell` left singular vectors.
///
/// With exact derivative snapshots, `ψ_i^(k) = S^(k) v_i / σ_i` differentiates
/// the same combination of snapshots that defines `ψ_i`. Otherwise, and for
/// modes at roundoff level, the grid differentiation matrices are used.
///
/// Signs are fixed so that the first entry of each vector exceeding `1e-10`
/// of its largest magnitude is positive.
pub fn compute_pod(snapshots: &SnapshotSet, ell: usize) -> Result<ReducedBasis> {
    let s = &snapshots.values;
    let (n, ns) = (s.rows(), s.cols());
    if ell == 0 || ell > n.min(ns) {
        return Err(config_err(alloc::format!(
            "ell = {ell} must lie in 1..={}",
            n.min(ns)
        )));
    }
    let svd = thin_svd(s)?;
    let mut basis = Matrix::zeros(n, ell);
    for (j, u) in svd.left.iter().take(ell).enumerate() {
        basis.set_column(j, u);
    }
    let d1 = diff_operator(&snapshots.grid, 1)?;
    let d2 = diff_operator(&snapshots.grid, 2)?;
    let mut basis_dx = d1.apply_columns(&basis);
    let mut basis_dxx = d2.apply_columns(&basis);
    if let Some((sx, sxx)) = &snapshots.derivatives {
        for (j, (v, &sigma)) in svd.right.iter().zip(&svd.values).take(ell).enumerate() {
            if v.iter().all(|&x| x == 0.0) {
                continue;
            }
            for (target, deriv) in [(&mut basis_dx, sx), (&mut basis_dxx, sxx)] {
                let col: Vec<f64> = (0..n).map(|i| dot(deriv.row(i), v) / sigma).collect();
                target.set_column(j, &col);
            }
        }
    }
    Ok(ReducedBasis {
        basis_dx,
        basis_dxx,
        basis,
        singular_values: svd.values,
    })
}

pub fn project(basis: &ReducedBasis, r: usize, field: &[f64]) -> Result<Vec<f64>> {
    basis.check_r(r)?;
    if field.len() != basis.n() {
        return Err(config_err(alloc::format!(
            "field has {} values, basis has {} rows",
            field.len(),
            basis.n()
        )));
    }
    let mut c = vec![0.0; r];
    for (i, &f) in field.iter().enumerate() {
        axpy(f, &basis.basis.row(i)[..r], &mut c);
    }
    Ok(c)
}

/// Thin SVD output, one entry per singular value (all `min(n, n_s)` of them)
/// in nonincreasing order.
///
/// `right[i]` satisfies `a · right[i] = values[i] · left[i]` to rounding; it is
/// zero where no such vector was resolved (singular values at roundoff level).
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub left: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub right: Vec<Vec<f64>>,
}

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 80;
/// Above this many columns a wide matrix is handled through its transpose.
const DIRECT_MAX_COLS: usize = 512;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns of `a` are rotated until mutually orthogonal while the rotations are
/// accumulated, so each left vector is exactly `a · v / ‖a · v‖` for an
/// orthonormal `v`. Very wide matrices are processed as `aᵀ` instead, which
/// gives the left vectors directly and the right ones only to `ε·σ₁/σ_i`.
pub fn thin_svd(a: &Matrix) -> Result<ThinSvd> {
    let transposed = a.cols() > a.rows() && a.cols() > DIRECT_MAX_COLS;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (m, k) = (work.rows(), work.cols());
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| work.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();

    // Columns at roundoff level relative to the whole matrix are not rotated further.
    let negligible = {
        let f = work.frobenius_norm() * f64::EPSILON;
        f * f
    };
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0
                    || alpha.min(beta) <= negligible
                    || gamma.abs() <= JACOBI_TOL * math::sqrt(alpha * beta)
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + math::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric("Jacobi SVD did not converge".into()));
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    if norms.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("SVD produced non-finite singular values".into()));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    order.truncate(m.min(k));

    let values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = values.first().copied().unwrap_or(0.0);
    let rank_tol = sigma_max * (m.max(k) as f64) * f64::EPSILON;
    let scaled = |c: &[f64], s: f64| -> Vec<f64> { c.iter().map(|x| x / s).collect() };
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(order.len());
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(order.len());
    for (rank, &j) in order.iter().enumerate() {
        let sigma = values[rank];
        let resolved = sigma > rank_tol;
        let (mut u, mut w) = if transposed {
            let w = if resolved { scaled(&cols[j], sigma) } else { vec![0.0; m] };
            (v[j].clone(), w)
        } else if resolved {
            (scaled(&cols[j], sigma), v[j].clone())
        } else {
            (complete_orthonormal(&left, m), vec![0.0; k])
        };
        if fix_sign(&mut u) {
            w.iter_mut().for_each(|x| *x = -*x);
        }
        left.push(u);
        right.push(w);
    }
    Ok(ThinSvd {
        left,
        values,
        right,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// A unit vector orthogonal to every vector in `existing`, built by
/// Gram–Schmidt on canonical vectors.
fn complete_orthonormal(existing: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..n {
        let mut cand = vec![0.0; n];
        cand[e] = 1.0;
        for _ in 0..2 {
            for u in existing {
                let d = dot(u, &cand);
                axpy(-d, u, &mut cand);
            }
        }
        let nrm = norm2(&cand);
        if nrm > best_norm {
            best_norm = nrm;
            best = Some(cand);
        }
        if nrm > 0.5 {
            break;
        }
    }
    let mut u = best.unwrap_or_else(|| vec![0.0; n]);
    for x in &mut u {
        *x /= best_norm;
    }
    u
}

/// Flips `u` if needed; returns whether it did.
fn fix_sign(u: &mut [f64]) -> bool {
    let peak = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    match u.iter().find(|x| x.abs() > 1e-10 * peak) {
        Some(first) if *first < 0.0 => {
            u.iter_mut().for_each(|x| *x = -*x);
            true
        }
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridKind};
    use crate::problems::{burgers_problem, sample_params};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Matrix::from_row_major(rows, cols, data).unwrap()
    }

    fn orthonormality_defect(b: &Matrix) -> f64 {
        let g = b.transpose().matmul(b);
        let mut worst = 0.0f64;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    fn snapshots_from(values: Matrix) -> SnapshotSet {
        let grid = build_grid(values.rows(), GridKind::Chebyshev).unwrap();
        let params = (0..values.cols()).map(|j| vec![j as f64]).collect();
        SnapshotSet::new(grid, params, values).unwrap()
    }

    #[test]
    fn rank_one() {
        let v = vec![0.0, 3.0, -4.0, 0.0, 12.0, 0.0, 1.0, 2.0];
        let s = Matrix::from_columns(&[v.clone()]).unwrap();
        let b = compute_pod(&snapshots_from(s), 1).unwrap();
        let nrm = norm2(&v);
        assert!((b.singular_values[0] - nrm).abs() < 1e-12);
        for (i, x) in v.iter().enumerate() {
            assert!((b.basis[(i, 0)] - x / nrm).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_singular_values() {
        let svd = thin_svd(&Matrix::identity(4)).unwrap();
        assert!(svd.values.iter().all(|s| (s - 1.0).abs() < 1e-15));
    }

    #[test]
    fn eckart_young_energy_identity() {
        let s = random_matrix(64, 20, 7);
        let b = compute_pod(&snapshots_from(s.clone()), 20).unwrap();
        assert!(orthonormality_defect(&b.basis) < 1e-10);
        for ell in [1, 5, 12, 19] {
            let bl = b.basis.leading_columns(ell);
            let proj = bl.matmul(&bl.transpose().matmul(&s));
            let mut resid = s.clone();
            for (r, p) in resid.as_mut_slice().iter_mut().zip(proj.as_slice()) {
                *r -= p;
            }
            let err = resid.frobenius_norm().powi(2);
            let tail: f64 = b.singular_values[ell..].iter().map(|x| x * x).sum();
            assert!((err - tail).abs() <= 1e-9 * tail, "ell={ell}: {err} vs {tail}");
        }
    }

    #[test]
    fn wide_matrices_and_rank_deficiency() {
        let s = random_matrix(12, 30, 9);
        let svd = thin_svd(&s).unwrap();
        assert_eq!(svd.values.len(), 12);
        let b = Matrix::from_columns(&svd.left).unwrap();
        assert!(orthonormality_defect(&b) < 1e-10);
        assert!(svd.values.windows(2).all(|w| w[0] >= w[1]));

        // Rank 2 but ask for 5 vectors: completion keeps orthonormality.
        let a = Matrix::from_columns(&[
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        let svd = thin_svd(&a).unwrap();
        assert!(orthonormality_defect(&Matrix::from_columns(&svd.left).unwrap()) < 1e-12);
    }

    #[test]
    fn right_vectors_map_onto_left() {
        for (rows, cols) in [(40, 15), (12, 30), (6, 600)] {
            let a = random_matrix(rows, cols, 3);
            let svd = thin_svd(&a).unwrap();
            for ((u, v), &sigma) in svd.left.iter().zip(&svd.right).zip(&svd.values) {
                assert!((norm2(v) - 1.0).abs() < 1e-12);
                let av: Vec<f64> = (0..rows).map(|i| dot(a.row(i), v)).collect();
                for (x, y) in av.iter().zip(u) {
                    assert!((x - sigma * y).abs() < 1e-11, "{rows}x{cols}");
                }
            }
        }
    }

    #[test]
    fn exact_derivatives_agree_with_differentiation_on_leading_modes() {
        let p = burgers_problem(1.0).unwrap();
        let g = build_grid(129, GridKind::Chebyshev).unwrap();
        let params = sample_params(&p, 40, 6).unwrap();
        let snaps = assemble_snapshots(&p, &g, &params).unwrap();
        let exact = compute_pod(&snaps, 20).unwrap();
        let mut plain = snaps.clone();
        plain.derivatives = None;
        let spectral = compute_pod(&plain, 20).unwrap();
        assert_eq!(exact.basis, spectral.basis);
        for j in 0..6 {
            for (a, b) in [(&exact.basis_dx, &spectral.basis_dx), (&exact.basis_dxx, &spectral.basis_dxx)] {
                let (ca, cb) = (a.column(j), b.column(j));
                let diff: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x - y).collect();
                assert!(norm2(&diff) < 1e-6 * norm2(&cb), "mode {j}");
            }
        }
        // Resolved trailing modes keep bounded second derivatives.
        let rank = exact.numerical_rank(1e-10);
        assert!(rank >= 10 && rank < 20, "rank {rank}");
        let peak = |m: &Matrix, j: usize| m.column(j).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for j in 6..rank {
            assert!(peak(&exact.basis_dxx, j) < 1e4, "mode {j}");
        }
    }

    #[test]
    fn ell_bounds() {
        let s = random_matrix(16, 4, 1);
        assert!(compute_pod(&snapshots_from(s.clone()), 5).is_err());
        assert!(compute_pod(&snapshots_from(s), 0).is_err());
    }

    #[test]
    fn projection_properties() {
        let s = random_matrix(32, 10, 5);
        let b = compute_pod(&snapshots_from(s), 10).unwrap();
        let psi1 = b.basis.column(0);
        let c = project(&b, 6, &psi1).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12 && c[1..].iter().all(|x| x.abs() < 1e-12));

        // Remove the span of all basis vectors from a random field.
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let f: Vec<f64> = (0..32).map(|_| rng.random::<f64>()).collect();
        let p = b.expand(&project(&b, 10, &f).unwrap()).unwrap();
        let orth: Vec<f64> = f.iter().zip(&p).map(|(a, b)| a - b).collect();
        assert!(project(&b, 10, &orth).unwrap().iter().all(|x| x.abs() < 1e-12));

        // P² = P.
        let p1 = b.expand(&project(&b, 4, &f).unwrap()).unwrap();
        let p2 = b.expand(&project(&b, 4, &p1).unwrap()).unwrap();
        assert!(p1.iter().zip(&p2).all(|(a, b)| (a - b).abs() < 1e-13));
        assert!(project(&b, 11, &f).is_err());
    }

    #[test]
    fn burgers_snapshots_and_deterministic_signs() {
        let p = burgers_problem(1.0).unwrap();
        let g = build_grid(65, GridKind::Chebyshev).unwrap();
        let params = sample_params(&p, 30, 4).unwrap();
        let snaps = assemble_snapshots(&p, &g, &params).unwrap();
        assert_eq!(snaps.values[(0, 3)], 0.0);
        assert_eq!(snaps.values[(64, 3)], 0.0);
        let a = compute_pod(&snaps, 20).unwrap();
        let b = compute_pod(&snaps, 20).unwrap();
        assert_eq!(a, b);
        assert!(orthonormality_defect(&a.basis) < 1e-10);
        assert!(a.singular_values.iter().all(|&s| s >= 0.0));
        assert!(a.singular_values.windows(2).all(|w| w[0] >= w[1]));

        let out_of_domain = [vec![0.0, 5.0]];
        assert!(matches!(
            assemble_snapshots(&p, &g, &out_of_domain),
            Err(Error::Domain { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn svd_factors_any_small_matrix(rows in 1usize..24, cols in 1usize..24, seed in proptest::prelude::any::<u64>()) {
            let a = random_matrix(rows, cols, seed);
            let svd = thin_svd(&a).unwrap();
            let k = rows.min(cols);
            proptest::prop_assert_eq!(svd.values.len(), k);
            proptest::prop_assert!(svd.values.windows(2).all(|w| w[0] >= w[1]));
            proptest::prop_assert!(svd.values.iter().all(|&v| v >= 0.0));
            let u = Matrix::from_columns(&svd.left).unwrap();
            proptest::prop_assert!(orthonormality_defect(&u) < 1e-10);
            // Frobenius norm is carried entirely by the singular values.
            let energy: f64 = svd.values.iter().map(|v| v * v).sum();
            let fro = a.frobenius_norm().powi(2);
            proptest::prop_assert!((energy - fro).abs() <= 1e-10 * fro.max(1e-300));
        }

        #[test]
        fn projection_is_idempotent(r in 1usize..8, seed in proptest::prelude::any::<u64>()) {
            let b = compute_pod(&snapshots_from(random_matrix(20, 10, seed)), 8).unwrap();
            let f = random_matrix(20, 1, seed ^ 1).column(0);
            let once = b.expand(&b.project(r, &f).unwrap()).unwrap();
            let twice = b.expand(&b.project(r, &once).unwrap()).unwrap();
            proptest::prop_assert!(once.iter().zip(&twice).all(|(a, c)| (a - c).abs() < 1e-12));
        }
    }
}
