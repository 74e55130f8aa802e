//! The composite surrogate `u_rb(x; μ) = U(Φ(ψ(x)); Θ(μ))` and its offline
//! training under a weighted Sobolev misfit.
//!
//! `Φ` maps the `ℓ` POD functions to `r` learned basis functions, `U` is a
//! one-hidden-layer reconstruction network and `Θ` is a hypernetwork that
//! emits the parameter vector of `U` for each `μ`. Only `Φ` and `Θ` own
//! trainable weights; `U` is a fixed architecture.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{config_err, Error, Result};
use crate::grid::{diff_operator, Grid, Quadrature};
use crate::linalg::Matrix;
use crate::math;
use crate::net::{
    backward_jet, backward_jet_into, forward_jet, Activation, AdamConfig, AdamState, FlatParams, Jet,
    JetTape, Mlp, MlpSpec,
};
use crate::pod::{ReducedBasis, SnapshotSet};
use crate::problems::Problem;

/// Network sizes of the composite model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub ell: usize,
    pub r: usize,
    /// Hidden width of `U`.
    pub u_hidden: usize,
    /// Hidden width of each `Θ` layer.
    pub theta_width: usize,
    pub theta_depth: usize,
}

impl Architecture {
    /// `Φ: ℓ → r → r` (swish), `U: r → 5 → 1` (tanh), `Θ: dim(μ) → 4×100 → |θ_U|` (swish).
    pub fn standard(ell: usize, r: usize) -> Self {
        Self {
            ell,
            r,
            u_hidden: 5,
            theta_width: 100,
            theta_depth: 4,
        }
    }
}

/// Affine map of each parameter component from its box onto `[-1, 1]`.
pub fn normalize_mu(domain: &[(f64, f64)], mu: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(domain)
        .map(|(&m, &(lo, hi))| 2.0 * (m - lo) / (hi - lo) - 1.0)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeModel {
    pub phi: Mlp,
    pub u_spec: MlpSpec,
    pub theta: Mlp,
    pub mu_domain: Vec<(f64, f64)>,
}

impl CompositeModel {
    /// Glorot-initialized model.
    pub fn new(arch: &Architecture, mu_domain: &[(f64, f64)], seed: u64) -> Result<Self> {
        if arch.r == 0 || arch.r > arch.ell {
            return Err(config_err(alloc::format!(
                "r = {} must lie in 1..=ell ({})",
                arch.r,
                arch.ell
            )));
        }
        if mu_domain.is_empty() || mu_domain.iter().any(|&(lo, hi)| !(hi > lo)) {
            return Err(config_err("parameter domain must be a nonempty box"));
        }
        let phi_spec = MlpSpec::new(vec![arch.ell, arch.r, arch.r], Activation::Swish)?;
        let u_spec = MlpSpec::new(vec![arch.r, arch.u_hidden, 1], Activation::Tanh)?;
        let mut sizes = vec![mu_domain.len()];
        sizes.extend(core::iter::repeat_n(arch.theta_width, arch.theta_depth));
        sizes.push(u_spec.param_count());
        let theta_spec = MlpSpec::new(sizes, Activation::Swish)?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let phi = Mlp::new(phi_spec.clone(), FlatParams::glorot(&phi_spec, &mut rng))?;
        let theta = Mlp::new(theta_spec.clone(), FlatParams::glorot(&theta_spec, &mut rng))?;
        Self::from_parts(phi, u_spec, theta, mu_domain.to_vec())
    }

    /// Assembles a model from existing networks, checking that they fit together.
    pub fn from_parts(phi: Mlp, u_spec: MlpSpec, theta: Mlp, mu_domain: Vec<(f64, f64)>) -> Result<Self> {
        if phi.spec.output_dim() != u_spec.input_dim() {
            return Err(config_err("Φ output size differs from U input size"));
        }
        if u_spec.output_dim() != 1 {
            return Err(config_err("U must have a single output"));
        }
        if theta.spec.output_dim() != u_spec.param_count() {
            return Err(config_err(alloc::format!(
                "Θ emits {} values but U has {} parameters",
                theta.spec.output_dim(),
                u_spec.param_count()
            )));
        }
        if theta.spec.input_dim() != mu_domain.len() {
            return Err(config_err("Θ input size differs from the parameter dimension"));
        }
        Ok(Self {
            phi,
            u_spec,
            theta,
            mu_domain,
        })
    }

    pub fn ell(&self) -> usize {
        self.phi.spec.input_dim()
    }

    pub fn r(&self) -> usize {
        self.phi.spec.output_dim()
    }

    /// `θ_U = Θ(μ)`.
    pub fn theta_u(&self, mu: &[f64]) -> Result<FlatParams> {
        self.check_mu_len(mu)?;
        Ok(FlatParams(self.theta.forward(&normalize_mu(&self.mu_domain, mu))?))
    }

    fn check_mu_len(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != self.mu_domain.len() {
            return Err(config_err(alloc::format!(
                "parameter has {} components, model expects {}",
                mu.len(),
                self.mu_domain.len()
            )));
        }
        Ok(())
    }
}

/// Learned basis functions `φ` and their spatial derivatives, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisFeatures {
    /// Channels: `φ`, `φ'` and (order 2) `φ''`, each `points × r`.
    pub jet: Jet,
}

impl BasisFeatures {
    pub fn values(&self) -> &Matrix {
        &self.jet.channels[0]
    }

    pub fn dx(&self) -> Option<&Matrix> {
        self.jet.channels.get(1)
    }

    pub fn dxx(&self) -> Option<&Matrix> {
        self.jet.channels.get(2)
    }
}

/// Jet of the POD functions on the grid up to derivative `order`.
pub fn basis_jet(basis: &ReducedBasis, order: usize) -> Result<Jet> {
    let mut ch = vec![basis.basis.clone()];
    if order >= 1 {
        ch.push(basis.basis_dx.clone());
    }
    if order >= 2 {
        ch.push(basis.basis_dxx.clone());
    }
    Jet::new(ch)
}

/// `φ = Φ(ψ)` with `φ' = J_Φ ψ'` and `φ'' = ψ'ᵀ H_Φ ψ' + J_Φ ψ''` at every grid point.
pub fn evaluate_basis_features(basis: &ReducedBasis, phi: &Mlp) -> Result<BasisFeatures> {
    features_from_jet(phi, &basis_jet(basis, 2)?)
}

/// Features for an arbitrary jet of POD values (e.g. interpolated off-grid).
pub fn features_from_jet(phi: &Mlp, psi: &Jet) -> Result<BasisFeatures> {
    if psi.dim() != phi.spec.input_dim() {
        return Err(config_err(alloc::format!(
            "basis has {} functions, Φ expects {}",
            psi.dim(),
            phi.spec.input_dim()
        )));
    }
    let (jet, _) = forward_jet(&phi.spec, &phi.params.0, psi)?;
    Ok(BasisFeatures { jet })
}

/// `u_rb` and its available derivatives for a given `θ_U`, one row per point.
pub fn reconstruct_jet(u_spec: &MlpSpec, features: &BasisFeatures, theta_u: &FlatParams) -> Result<Jet> {
    Ok(forward_jet(u_spec, &theta_u.0, &features.jet)?.0)
}

/// `u_rb(x_i) = U(φ(x_i); Θ(μ))` at every feature row.
pub fn reconstruct(model: &CompositeModel, features: &BasisFeatures, mu: &[f64]) -> Result<Vec<f64>> {
    let theta_u = model.theta_u(mu)?;
    reconstruct_with(model, features, &theta_u)
}

/// As [`reconstruct`] with an explicit `θ_U`.
pub fn reconstruct_with(model: &CompositeModel, features: &BasisFeatures, theta_u: &FlatParams) -> Result<Vec<f64>> {
    let values = BasisFeatures {
        jet: Jet::values(features.values().clone()),
    };
    Ok(reconstruct_jet(&model.u_spec, &values, theta_u)?.channels[0].column(0))
}

/// Sobolev-misfit settings and the optimizer schedule of offline training.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineLossConfig {
    /// Highest derivative order in the misfit (0, 1 or 2).
    pub p: usize,
    /// `λ_α` for `α = 0..=p`.
    pub lambdas: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
}

impl Default for OfflineLossConfig {
    fn default() -> Self {
        Self {
            p: 1,
            lambdas: vec![1.0, 1e-3],
            epochs: 20_000,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 2000,
            seed: 0,
        }
    }
}

impl OfflineLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p > 2 {
            return Err(config_err(alloc::format!("Sobolev order {} not in 0..=2", self.p)));
        }
        if self.lambdas.len() != self.p + 1 {
            return Err(config_err(alloc::format!(
                "{} derivative weights given for order {}",
                self.lambdas.len(),
                self.p
            )));
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(config_err("derivative weights must be nonnegative"));
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

/// One labelled training sample: `μ` and `D^α u_h` on the grid for `α = 0..=p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub mu: Vec<f64>,
    pub derivs: Vec<Vec<f64>>,
}

/// Labelled data with analytic derivative targets from the problem's solution.
pub fn dataset_from_problem(
    problem: &dyn Problem,
    grid: &Grid,
    params: &[Vec<f64>],
    p: usize,
) -> Result<Vec<Sample>> {
    params
        .iter()
        .map(|mu| {
            problem.check_mu(mu)?;
            let jets: Vec<_> = grid.points().iter().map(|&x| problem.solution(x, mu)).collect();
            let mut derivs = vec![jets.iter().map(|j| j.u).collect::<Vec<_>>()];
            if p >= 1 {
                derivs.push(jets.iter().map(|j| j.ux).collect());
            }
            if p >= 2 {
                derivs.push(jets.iter().map(|j| j.uxx).collect());
            }
            Ok(Sample {
                mu: mu.clone(),
                derivs,
            })
        })
        .collect()
}

/// Labelled data from raw snapshots, differentiating with the grid operators.
pub fn dataset_from_snapshots(snapshots: &SnapshotSet, p: usize) -> Result<Vec<Sample>> {
    let ops: Vec<_> = (1..=p).map(|o| diff_operator(&snapshots.grid, o)).collect::<Result<_>>()?;
    Ok((0..snapshots.len())
        .map(|j| {
            let u = snapshots.values.column(j);
            let mut derivs = vec![u.clone()];
            derivs.extend(ops.iter().map(|d| d.apply(&u)));
            Sample {
                mu: snapshots.params[j].clone(),
                derivs,
            }
        })
        .collect())
}

/// Loss value with gradients for `θ_Φ` and `θ_Θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
}

fn check_dataset(model: &CompositeModel, basis: &ReducedBasis, quad: &Quadrature, data: &[Sample], p: usize) -> Result<()> {
    if basis.ell() != model.ell() {
        return Err(config_err(alloc::format!(
            "basis has {} functions, model expects {}",
            basis.ell(),
            model.ell()
        )));
    }
    let n = basis.n();
    if quad.weights().len() != n {
        return Err(config_err("quadrature and basis use different grids"));
    }
    for s in data {
        model.check_mu_len(&s.mu)?;
        if s.derivs.len() < p + 1 || s.derivs[..=p].iter().any(|d| d.len() != n) {
            return Err(config_err("sample targets do not match the grid or Sobolev order"));
        }
    }
    Ok(())
}

/// `Σ_i Σ_{α≤p} λ_α Σ_j w_j (D^α u_rb − D^α u_h)²(x_j)`.
pub fn offline_loss(
    model: &CompositeModel,
    basis: &ReducedBasis,
    quad: &Quadrature,
    data: &[Sample],
    cfg: &OfflineLossConfig,
) -> Result<f64> {
    Ok(offline_loss_impl(model, basis, quad, data, cfg, false)?.loss)
}

/// [`offline_loss`] together with its gradient, via the chain rule through
/// `U`, back into `Θ` (through `θ_U`) and into `Φ` (through the features).
pub fn offline_loss_grad(
    model: &CompositeModel,
    basis: &ReducedBasis,
    quad: &Quadrature,
    data: &[Sample],
    cfg: &OfflineLossConfig,
) -> Result<LossGradient> {
    offline_loss_impl(model, basis, quad, data, cfg, true)
}

fn offline_loss_impl(
    model: &CompositeModel,
    basis: &ReducedBasis,
    quad: &Quadrature,
    data: &[Sample],
    cfg: &OfflineLossConfig,
    with_grad: bool,
) -> Result<LossGradient> {
    cfg.validate()?;
    check_dataset(model, basis, quad, data, cfg.p)?;
    let n = basis.n();
    let r = model.r();
    let psi = basis_jet(basis, cfg.p)?;
    let (features, phi_tape) = forward_jet(&model.phi.spec, &model.phi.params.0, &psi)?;
    let w = quad.weights();

    let mut loss = 0.0;
    let mut grad_theta = vec![0.0; model.theta.spec.param_count()];
    let mut feat_adj = Jet::zeros(n, r, cfg.p);

    // All θ_U = Θ(μ_i) in one batched pass.
    let mu_rows: Vec<f64> = data.iter().flat_map(|s| normalize_mu(&model.mu_domain, &s.mu)).collect();
    let mu_jet = Jet::values(Matrix::from_row_major(data.len(), model.mu_domain.len(), mu_rows)?);
    let (theta_out, theta_tape) = forward_jet(&model.theta.spec, &model.theta.params.0, &mu_jet)?;
    let mut theta_adj = Jet::zeros(data.len(), model.u_spec.param_count(), 0);

    for (i, s) in data.iter().enumerate() {
        let theta_u = theta_out.channels[0].row(i);
        let (u, u_tape): (Jet, JetTape) = forward_jet(&model.u_spec, theta_u, &features)?;

        let mut adj = Jet::zeros(n, 1, cfg.p);
        for (alpha, &lam) in cfg.lambdas.iter().enumerate() {
            let pred = u.channels[alpha].as_slice();
            let target = &s.derivs[alpha];
            let a = adj.channels[alpha].as_mut_slice();
            for j in 0..n {
                let d = pred[j] - target[j];
                loss += lam * w[j] * d * d;
                a[j] = 2.0 * lam * w[j] * d;
            }
        }
        if !with_grad {
            continue;
        }
        let u_grad = theta_adj.channels[0].row_mut(i);
        let fadj = backward_jet_into(&model.u_spec, theta_u, &u_tape, &adj, u_grad)?;
        for (acc, c) in feat_adj.channels.iter_mut().zip(&fadj.channels) {
            crate::linalg::axpy(1.0, c.as_slice(), acc.as_mut_slice());
        }
    }
    if with_grad {
        backward_jet_into(&model.theta.spec, &model.theta.params.0, &theta_tape, &theta_adj, &mut grad_theta)?;
    }
    if !loss.is_finite() {
        return Err(Error::Training {
            epoch: 0,
            reason: "non-finite offline loss".into(),
        });
    }
    let grad_phi = if with_grad {
        backward_jet(&model.phi.spec, &model.phi.params.0, &phi_tape, &feat_adj)?.0
    } else {
        Vec::new()
    };
    Ok(LossGradient {
        loss,
        phi: grad_phi,
        theta: grad_theta,
    })
}

/// Trained model and the per-epoch loss (evaluated before each update).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: CompositeModel,
    pub loss_history: Vec<f64>,
}

/// Full-batch Adam on `(θ_Φ, θ_Θ)` jointly.
///
/// `observer` is called after every epoch with the epoch index and loss.
pub fn train_offline(
    model: CompositeModel,
    basis: &ReducedBasis,
    quad: &Quadrature,
    data: &[Sample],
    cfg: &OfflineLossConfig,
    mut observer: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(config_err("offline training needs at least one sample"));
    }
    let mut model = model;
    let n_phi = model.phi.params.len();
    let mut params: Vec<f64> = model.phi.params.0.iter().chain(&model.theta.params.0).copied().collect();
    let mut adam = AdamState::new(params.len(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; params.len()];
    for epoch in 0..cfg.epochs {
        let lg = offline_loss_grad(&model, basis, quad, data, cfg).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { epoch, reason },
            other => other,
        })?;
        history.push(lg.loss);
        observer(epoch, lg.loss);
        grad[..n_phi].copy_from_slice(&lg.phi);
        grad[n_phi..].copy_from_slice(&lg.theta);
        adam.set_lr(cfg.lr_at(epoch));
        adam.step(&mut params, &grad).map_err(|_| Error::Training {
            epoch,
            reason: "non-finite gradient".into(),
        })?;
        model.phi.params.0.copy_from_slice(&params[..n_phi]);
        model.theta.params.0.copy_from_slice(&params[n_phi..]);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, quadrature_weights, GridKind};
    use crate::pod::{assemble_snapshots, compute_pod};
    use crate::problems::{burgers_problem, sample_params};
    use rand::Rng;

    fn small_setup(n: usize, ns: usize, ell: usize) -> (Grid, ReducedBasis, Vec<Vec<f64>>) {
        let p = burgers_problem(1.0).unwrap();
        let g = build_grid(n, GridKind::Chebyshev).unwrap();
        let params = sample_params(&p, ns, 1).unwrap();
        let snaps = assemble_snapshots(&p, &g, &params).unwrap();
        (g, compute_pod(&snaps, ell).unwrap(), params)
    }

    fn tiny_arch(ell: usize, r: usize) -> Architecture {
        Architecture {
            ell,
            r,
            u_hidden: 5,
            theta_width: 6,
            theta_depth: 2,
        }
    }

    #[test]
    fn theta_output_matches_u_parameter_count() {
        for r in 1..=20 {
            let m = CompositeModel::new(&Architecture::standard(20, r), &[(1.0, 10.0); 2], 0).unwrap();
            assert_eq!(m.theta.spec.output_dim(), 5 * r + 11);
            assert_eq!(m.ell(), 20);
            assert_eq!(m.r(), r);
        }
        assert!(CompositeModel::new(&Architecture::standard(4, 5), &[(1.0, 10.0); 2], 0).is_err());
    }

    #[test]
    fn zero_networks_give_zero_fields() {
        let (_, basis, _) = small_setup(33, 10, 6);
        let mut m = CompositeModel::new(&tiny_arch(6, 3), &[(1.0, 10.0); 2], 0).unwrap();
        m.phi.params.0.iter_mut().for_each(|v| *v = 0.0);
        let f = evaluate_basis_features(&basis, &m.phi).unwrap();
        for c in &f.jet.channels {
            assert!(c.as_slice().iter().all(|&v| v == 0.0));
        }
        m.theta.params.0.iter_mut().for_each(|v| *v = 0.0);
        let f2 = evaluate_basis_features(&basis, &CompositeModel::new(&tiny_arch(6, 3), &[(1.0, 10.0); 2], 1).unwrap().phi).unwrap();
        assert!(reconstruct(&m, &f2, &[3.0, 4.0]).unwrap().iter().all(|&v| v == 0.0));
        // Zero features and zero U biases.
        let tu = CompositeModel::new(&tiny_arch(6, 3), &[(1.0, 10.0); 2], 2).unwrap().theta_u(&[2.0, 2.0]).unwrap();
        let mut tu = tu;
        let sp = &m.u_spec;
        let (r, h) = (sp.sizes()[0], sp.sizes()[1]);
        tu.0[r * h..r * h + h].iter_mut().for_each(|v| *v = 0.0);
        *tu.0.last_mut().unwrap() = 0.0;
        assert!(reconstruct_with(&m, &f, &tu).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_phi_passes_basis_through() {
        let (_, basis, _) = small_setup(33, 10, 4);
        let spec = MlpSpec::new(vec![4, 4], Activation::Identity).unwrap();
        let mut p = FlatParams::zeros(&spec);
        for i in 0..4 {
            p.0[i * 4 + i] = 1.0;
        }
        let phi = Mlp::new(spec, p).unwrap();
        let f = evaluate_basis_features(&basis, &phi).unwrap();
        assert_eq!(f.values(), &basis.basis);
        assert_eq!(f.dx().unwrap(), &basis.basis_dx);
        assert_eq!(f.dxx().unwrap(), &basis.basis_dxx);
    }

    #[test]
    fn feature_derivatives_match_refined_finite_differences() {
        // Φ applied to analytically known "basis functions" on a fine grid;
        // differentiate the resulting features with high-order differences.
        let g = build_grid(129, GridKind::Chebyshev).unwrap();
        let fine = build_grid(4 * 128 + 1, GridKind::Chebyshev).unwrap();
        let funcs = |x: f64| [math::sin(2.0 * x), x * x - 0.3, math::cos(3.0 * x + 0.2)];
        let dfuncs = |x: f64| [2.0 * math::cos(2.0 * x), 2.0 * x, -3.0 * math::sin(3.0 * x + 0.2)];
        let ddfuncs = |x: f64| [-4.0 * math::sin(2.0 * x), 2.0, -9.0 * math::cos(3.0 * x + 0.2)];
        let mk = |grid: &Grid, f: &dyn Fn(f64) -> [f64; 3]| {
            let rows: Vec<f64> = grid.points().iter().flat_map(|&x| f(x)).collect();
            Matrix::from_row_major(grid.len(), 3, rows).unwrap()
        };
        let m = CompositeModel::new(&tiny_arch(3, 2), &[(1.0, 10.0); 2], 9).unwrap();
        let jet = Jet::new(vec![mk(&g, &funcs), mk(&g, &dfuncs), mk(&g, &ddfuncs)]).unwrap();
        let feats = features_from_jet(&m.phi, &jet).unwrap();
        let fine_feats = features_from_jet(&m.phi, &Jet::values(mk(&fine, &funcs))).unwrap();
        let d1 = diff_operator(&fine, 1).unwrap();
        let d2 = diff_operator(&fine, 2).unwrap();
        for k in 0..2 {
            let col = fine_feats.values().column(k);
            let (fd1, fd2) = (d1.apply(&col), d2.apply(&col));
            let scale1 = fd1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale2 = fd2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..g.len() {
                // Coarse node i coincides with fine node 4i.
                let e1 = (feats.dx().unwrap()[(i, k)] - fd1[4 * i]).abs() / scale1;
                let e2 = (feats.dxx().unwrap()[(i, k)] - fd2[4 * i]).abs() / scale2;
                assert!(e1 < 1e-5, "dφ/dx rel err {e1}");
                assert!(e2 < 1e-5, "d²φ/dx² rel err {e2}");
            }
        }
    }

    fn offline_cfg(p: usize, lambdas: Vec<f64>) -> OfflineLossConfig {
        OfflineLossConfig {
            p,
            lambdas,
            ..OfflineLossConfig::default()
        }
    }

    #[test]
    fn exact_fit_has_zero_loss_and_weights_scale_linearly() {
        let (g, basis, params) = small_setup(33, 6, 4);
        let q = quadrature_weights(&g);
        let m = CompositeModel::new(&tiny_arch(4, 2), &[(1.0, 10.0); 2], 3).unwrap();
        let f = evaluate_basis_features(&basis, &m.phi).unwrap();
        // Targets equal to the model's own prediction.
        let data: Vec<Sample> = params
            .iter()
            .map(|mu| {
                let tu = m.theta_u(mu).unwrap();
                let jet = reconstruct_jet(&m.u_spec, &f, &tu).unwrap();
                Sample {
                    mu: mu.clone(),
                    derivs: jet.channels.iter().map(|c| c.column(0)).collect(),
                }
            })
            .collect();
        assert!(offline_loss(&m, &basis, &q, &data, &offline_cfg(1, vec![1.0, 1e-3])).unwrap() < 1e-28);

        let p = burgers_problem(1.0).unwrap();
        let real = dataset_from_problem(&p, &g, &params, 1).unwrap();
        let l1 = offline_loss(&m, &basis, &q, &real, &offline_cfg(1, vec![1.0, 0.0])).unwrap();
        let l2 = offline_loss(&m, &basis, &q, &real, &offline_cfg(1, vec![2.0, 0.0])).unwrap();
        assert!((l2 - 2.0 * l1).abs() <= 1e-14 * l2);

        // λ1 = 0: hand-assembled weighted L² misfit of one sample.
        let one = &real[..1];
        let pred = reconstruct(&m, &f, &one[0].mu).unwrap();
        let want: f64 = (0..g.len())
            .map(|j| q.weights()[j] * (pred[j] - one[0].derivs[0][j]).powi(2))
            .sum();
        let got = offline_loss(&m, &basis, &q, one, &offline_cfg(1, vec![1.0, 0.0])).unwrap();
        assert!((got - want).abs() <= 1e-13 * want);
    }

    #[test]
    fn offline_gradient_matches_finite_differences() {
        let (g, basis, params) = small_setup(33, 10, 4);
        let q = quadrature_weights(&g);
        let p = burgers_problem(1.0).unwrap();
        let data = dataset_from_problem(&p, &g, &params[..2], 1).unwrap();
        let cfg = offline_cfg(1, vec![1.0, 1e-3]);
        let m = CompositeModel::new(&tiny_arch(4, 2), &[(1.0, 10.0); 2], 5).unwrap();
        let lg = offline_loss_grad(&m, &basis, &q, &data, &cfg).unwrap();
        // Five-point central differences keep roundoff below the 1e-5 budget
        // even for gradient entries four orders below the loss scale.
        let h = 1e-4;
        let mut r = Xoshiro256PlusPlus::seed_from_u64(8);
        let mut checked = 0;
        for which in 0..2 {
            let len = if which == 0 { m.phi.params.len() } else { m.theta.params.len() };
            let gvec = if which == 0 { &lg.phi } else { &lg.theta };
            for _ in 0..30 {
                let k = r.random_range(0..len);
                let eval = |delta: f64| {
                    let mut mp = m.clone();
                    if which == 0 {
                        mp.phi.params.0[k] += delta;
                    } else {
                        mp.theta.params.0[k] += delta;
                    }
                    offline_loss(&mp, &basis, &q, &data, &cfg).unwrap()
                };
                let fd = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
                let gp = gvec[k];
                if gp.abs() < 1e-12 {
                    continue;
                }
                checked += 1;
                let rel = (gp - fd).abs() / gp.abs().max(fd.abs());
                assert!(rel < 1e-5, "{which}/{k}: {gp} vs {fd}");
            }
        }
        assert!(checked > 40);
    }

    #[test]
    fn snapshot_derivatives_agree_with_analytic_targets() {
        let p = burgers_problem(1.0).unwrap();
        let g = build_grid(129, GridKind::Chebyshev).unwrap();
        let params = sample_params(&p, 3, 2).unwrap();
        let snaps = assemble_snapshots(&p, &g, &params).unwrap();
        let a = dataset_from_problem(&p, &g, &params, 1).unwrap();
        let b = dataset_from_snapshots(&snaps, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.derivs[0], y.derivs[0]);
            let err = x.derivs[1].iter().zip(&y.derivs[1]).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn training_decreases_loss_and_is_deterministic() {
        let (g, basis, params) = small_setup(33, 1, 1);
        let q = quadrature_weights(&g);
        let p = burgers_problem(1.0).unwrap();
        let data = dataset_from_problem(&p, &g, &params[..1], 1).unwrap();
        let cfg = OfflineLossConfig {
            epochs: 5000,
            lr: 1e-3,
            lr_decay: 1.0,
            ..OfflineLossConfig::default()
        };
        let arch = tiny_arch(1, 1);
        let run = || {
            let m = CompositeModel::new(&arch, &[(1.0, 10.0); 2], 4).unwrap();
            train_offline(m, &basis, &q, &data, &cfg, |_, _| {}).unwrap()
        };
        let a = run();
        let windows: Vec<f64> = a.loss_history.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
        assert!(windows.last().unwrap() < &(1e-2 * windows[0]));
        let b = run();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn empty_dataset_rejected() {
        let (g, basis, _) = small_setup(17, 4, 2);
        let m = CompositeModel::new(&tiny_arch(2, 1), &[(1.0, 10.0); 2], 0).unwrap();
        let q = quadrature_weights(&g);
        assert!(train_offline(m, &basis, &q, &[], &OfflineLossConfig::default(), |_, _| {}).is_err());
    }
}
