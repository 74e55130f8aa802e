//! Linear reduced-basis baselines: POD-NN regression of the projection
//! coefficients and the best approximation in the POD subspace.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{config_err, Error, Result};
use crate::eval::relative_error;
use crate::grid::Quadrature;
use crate::linalg::Matrix;
use crate::math;
use crate::model::normalize_mu;
use crate::net::{backward_jet_into, forward_jet, Activation, AdamConfig, AdamState, FlatParams, Jet, Mlp, MlpSpec};
use crate::pod::{ReducedBasis, SnapshotSet};

#[derive(Debug, Clone, PartialEq)]
pub struct PodNnConfig {
    pub width: usize,
    pub depth: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
}

impl Default for PodNnConfig {
    fn default() -> Self {
        Self {
            width: 100,
            depth: 4,
            epochs: 20_000,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 2000,
            seed: 0,
        }
    }
}

impl PodNnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(config_err("POD-NN needs at least one nonempty hidden layer"));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return Err(config_err("learning-rate schedule must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * math::powi(self.lr_decay, (epoch / self.lr_decay_every) as i32)
    }
}

/// `G: μ ↦ r` reduced coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PodNnModel {
    pub g: Mlp,
    pub r: usize,
    pub mu_domain: Vec<(f64, f64)>,
}

impl PodNnModel {
    pub fn new(r: usize, mu_domain: &[(f64, f64)], cfg: &PodNnConfig) -> Result<Self> {
        cfg.validate()?;
        if r == 0 {
            return Err(config_err("r must be positive"));
        }
        let mut sizes = vec![mu_domain.len()];
        sizes.extend(core::iter::repeat_n(cfg.width, cfg.depth));
        sizes.push(r);
        let spec = MlpSpec::new(sizes, Activation::Swish)?;
        let params = FlatParams::glorot(&spec, &mut Xoshiro256PlusPlus::seed_from_u64(cfg.seed));
        Ok(Self {
            g: Mlp { spec, params },
            r,
            mu_domain: mu_domain.to_vec(),
        })
    }

    pub fn coefficients(&self, mu: &[f64]) -> Result<Vec<f64>> {
        if mu.len() != self.mu_domain.len() {
            return Err(config_err("parameter dimension mismatch"));
        }
        self.g.forward(&normalize_mu(&self.mu_domain, mu))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodNnOutcome {
    pub model: PodNnModel,
    pub loss_history: Vec<f64>,
}

/// Fits `G` to the rank-`r` projection coefficients of every snapshot with
/// full-batch Adam on `Σ_i ‖ũ_i − G(μ_i)‖²`.
pub fn train_podnn(
    basis: &ReducedBasis,
    r: usize,
    snapshots: &SnapshotSet,
    mu_domain: &[(f64, f64)],
    cfg: &PodNnConfig,
    mut observer: impl FnMut(usize, f64),
) -> Result<PodNnOutcome> {
    if r > basis.ell() {
        return Err(config_err(alloc::format!("r = {r} exceeds the basis size {}", basis.ell())));
    }
    if snapshots.is_empty() {
        return Err(config_err("POD-NN training needs at least one snapshot"));
    }
    let mut model = PodNnModel::new(r, mu_domain, cfg)?;
    let ns = snapshots.len();
    let mut labels = Vec::with_capacity(ns * r);
    let mut inputs = Vec::with_capacity(ns * mu_domain.len());
    for (j, mu) in snapshots.params.iter().enumerate() {
        labels.extend(basis.project(r, &snapshots.values.column(j))?);
        inputs.extend(normalize_mu(mu_domain, mu));
    }
    let input = Jet::values(Matrix::from_row_major(ns, mu_domain.len(), inputs)?);

    let spec = model.g.spec.clone();
    let mut adam = AdamState::new(spec.param_count(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; spec.param_count()];
    for epoch in 0..cfg.epochs {
        let (out, tape) = forward_jet(&spec, &model.g.params.0, &input)?;
        let mut adj = Matrix::zeros(ns, r);
        let mut loss = 0.0;
        for ((a, &o), &l) in adj.as_mut_slice().iter_mut().zip(out.channels[0].as_slice()).zip(&labels) {
            let d = o - l;
            loss += d * d;
            *a = 2.0 * d;
        }
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "non-finite POD-NN loss".into(),
            });
        }
        history.push(loss);
        observer(epoch, loss);
        grad.fill(0.0);
        backward_jet_into(&spec, &model.g.params.0, &tape, &Jet::values(adj), &mut grad)?;
        adam.set_lr(cfg.lr_at(epoch));
        adam.step(&mut model.g.params.0, &grad).map_err(|_| Error::Training {
            epoch,
            reason: "non-finite gradient".into(),
        })?;
    }
    Ok(PodNnOutcome {
        model,
        loss_history: history,
    })
}

/// `u_rb = B_r G(μ)` on the grid.
pub fn podnn_predict(model: &PodNnModel, basis: &ReducedBasis, mu: &[f64]) -> Result<Vec<f64>> {
    basis.expand(&model.coefficients(mu)?)
}

/// Best approximation of `exact` in the span of the first `r` basis vectors,
/// orthogonal in the quadrature inner product so that the error is minimal in
/// the norm it is measured in.
pub fn projection(basis: &ReducedBasis, r: usize, exact: &[f64], quad: &Quadrature) -> Result<Vec<f64>> {
    if r > basis.ell() {
        return Err(config_err(alloc::format!("r = {r} exceeds the basis size {}", basis.ell())));
    }
    let w = quad.weights();
    if exact.len() != basis.n() || w.len() != basis.n() {
        return Err(config_err("field, basis and quadrature sizes differ"));
    }
    let inner = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(w).map(|((x, y), wj)| wj * x * y).sum() };
    let mut out = vec![0.0; exact.len()];
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(r);
    for k in 0..r {
        let mut v = basis.basis.column(k);
        // Two Gram-Schmidt passes keep the weighted orthogonality at roundoff.
        for _ in 0..2 {
            for qi in &q {
                let c = inner(qi, &v);
                crate::linalg::axpy(-c, qi, &mut v);
            }
        }
        let nv = math::sqrt(inner(&v, &v));
        if !(nv > 0.0) {
            return Err(Error::Numeric("basis vectors are linearly dependent".into()));
        }
        v.iter_mut().for_each(|x| *x /= nv);
        crate::linalg::axpy(inner(&v, exact), &v, &mut out);
        q.push(v);
    }
    Ok(out)
}

/// Relative error of [`projection`] in the quadrature norm.
pub fn optimal_projection_error(basis: &ReducedBasis, r: usize, exact: &[f64], quad: &Quadrature) -> Result<f64> {
    relative_error(&projection(basis, r, exact, quad)?, exact, quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, quadrature_weights, GridKind};
    use crate::pod::{assemble_snapshots, compute_pod};
    use crate::problems::{burgers_problem, sample_params, Problem};

    const DOMAIN: [(f64, f64); 2] = [(1.0, 10.0); 2];

    fn setup(kappa: f64, ns: usize) -> (SnapshotSet, ReducedBasis, Quadrature) {
        let p = burgers_problem(kappa).unwrap();
        let g = build_grid(65, GridKind::Chebyshev).unwrap();
        let params = sample_params(&p, ns, 4).unwrap();
        let snaps = assemble_snapshots(&p, &g, &params).unwrap();
        let basis = compute_pod(&snaps, 20.min(ns)).unwrap();
        let q = quadrature_weights(&g);
        (snaps, basis, q)
    }

    #[test]
    fn projection_error_is_nonincreasing_in_r() {
        for kappa in [1.0, 9.0] {
            let (snaps, basis, q) = setup(kappa, 40);
            let p = burgers_problem(kappa).unwrap();
            for mu in sample_params(&p, 5, 8).unwrap() {
                let u = p.sample_solution(&snaps.grid, &mu).unwrap();
                let errs: Vec<f64> = (1..=20).map(|r| optimal_projection_error(&basis, r, &u, &q).unwrap()).collect();
                for w in errs.windows(2) {
                    assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{errs:?}");
                }
            }
        }
    }

    #[test]
    fn fields_in_the_span_project_exactly() {
        let (_, basis, q) = setup(1.0, 30);
        let u = basis.expand(&[1.0, -2.0, 0.5]).unwrap();
        assert!(optimal_projection_error(&basis, 3, &u, &q).unwrap() < 1e-12);
    }

    #[test]
    fn full_rank_basis_reproduces_snapshots() {
        let (snaps, basis, q) = setup(1.0, 12);
        let u = snaps.values.column(5);
        assert!(optimal_projection_error(&basis, 12, &u, &q).unwrap() < 1e-12);
    }

    #[test]
    fn zero_network_predicts_zero() {
        let (_, basis, _) = setup(1.0, 10);
        let mut m = PodNnModel::new(4, &DOMAIN, &PodNnConfig::default()).unwrap();
        m.g.params.0.fill(0.0);
        assert!(podnn_predict(&m, &basis, &[3.0, 3.0]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predictions_lie_in_the_span() {
        let (_, basis, _) = setup(1.0, 20);
        let m = PodNnModel::new(5, &DOMAIN, &PodNnConfig::default()).unwrap();
        let u = podnn_predict(&m, &basis, &[2.0, 7.0]).unwrap();
        let back = basis.expand(&basis.project(5, &u).unwrap()).unwrap();
        let dev = u.iter().zip(&back).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(dev < 1e-12);
    }

    #[test]
    fn single_sample_is_interpolated() {
        let (snaps, basis, _) = setup(1.0, 10);
        let one = SnapshotSet::new(
            snaps.grid.clone(),
            vec![snaps.params[0].clone()],
            Matrix::from_columns(&[snaps.values.column(0)]).unwrap(),
        )
        .unwrap();
        let cfg = PodNnConfig {
            width: 16,
            depth: 2,
            epochs: 3000,
            lr: 1e-2,
            lr_decay: 0.5,
            lr_decay_every: 500,
            seed: 1,
        };
        let out = train_podnn(&basis, 4, &one, &DOMAIN, &cfg, |_, _| {}).unwrap();
        assert!(*out.loss_history.last().unwrap() < 1e-8);
        let c = out.model.coefficients(&snaps.params[0]).unwrap();
        let label = basis.project(4, &snaps.values.column(0)).unwrap();
        for (a, b) in c.iter().zip(&label) {
            assert!((a - b).abs() < 1e-3);
        }
        let again = train_podnn(&basis, 4, &one, &DOMAIN, &cfg, |_, _| {}).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn r_above_ell_rejected() {
        let (snaps, basis, _) = setup(1.0, 10);
        assert!(train_podnn(&basis, 11, &snaps, &DOMAIN, &PodNnConfig::default(), |_, _| {}).is_err());
    }
}
