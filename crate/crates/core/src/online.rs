//! Online adaptation of the reconstruction network for one parameter value.
//!
//! With `Φ` frozen, the learned basis functions and their first two spatial
//! derivatives are precomputed at random interior collocation points and at
//! the boundary. The weights `θ_U` are then fitted to the strong-form
//! residual loss
//!
//! ```text
//! L(θ_U) = Σ_i N[u_rb](x_i)² + λ Σ_j B[u_rb](x'_j)² + γ_k ‖θ_U − θ_U*‖²
//! ```
//!
//! starting from the hypernetwork prediction `θ_U* = Θ(μ*)`, with the
//! proximal weight decaying geometrically, `γ_k = γ₀ ρ^k`.
//!
//! Since `U` is small the loss is also cheap to minimize as a nonlinear least
//! squares problem; [`OnlineOptimizer::LevenbergMarquardt`] does that with an
//! exact Jacobian of the residual vector.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{config_err, Result};
use crate::grid::Grid;
use crate::linalg::{cholesky_solve, gemm, Matrix};
use crate::math;
use crate::model::{features_from_jet, BasisFeatures, CompositeModel};
use crate::net::{backward_jet, backward_jet_into, forward_jet, AdamConfig, AdamState, FlatParams, Jet, MlpSpec};
use crate::pod::ReducedBasis;
use crate::problems::{PointJet, Problem};
use crate::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnlineOptimizer {
    /// First-order steps with learning rate `lr`.
    #[default]
    Adam,
    /// Damped Gauss–Newton steps; `lr` is unused.
    LevenbergMarquardt,
}

impl OnlineOptimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adam => "adam",
            Self::LevenbergMarquardt => "levenberg-marquardt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(Self::Adam),
            "levenberg-marquardt" => Some(Self::LevenbergMarquardt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineConfig {
    /// Interior collocation points.
    pub m1: usize,
    /// Boundary collocation points (cycled over the problem's boundary set).
    pub m2: usize,
    /// Boundary weight `λ`.
    pub lambda: f64,
    pub gamma0: f64,
    /// Per-epoch decay `ρ` of the proximal weight.
    pub decay: f64,
    pub max_epochs: usize,
    pub stop_tol: f64,
    pub lr: f64,
    pub optimizer: OnlineOptimizer,
    /// Seed for the interior collocation points.
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            m1: 128,
            m2: 2,
            lambda: 10.0,
            gamma0: 1e-2,
            decay: 0.99,
            max_epochs: 50_000,
            stop_tol: 1e-4,
            lr: 1e-3,
            optimizer: OnlineOptimizer::Adam,
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m1 == 0 {
            return Err(config_err("need at least one interior collocation point"));
        }
        if !(self.gamma0 >= 0.0) {
            return Err(config_err("gamma0 must be nonnegative"));
        }
        // ρ = 1 (no decay) is accepted for experiments with a fixed proximal weight.
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(config_err("decay must lie in (0, 1]"));
        }
        if !(self.stop_tol > 0.0) {
            return Err(config_err("stop_tol must be positive"));
        }
        if !(self.lambda >= 0.0) || (self.optimizer == OnlineOptimizer::Adam && !(self.lr > 0.0)) {
            return Err(config_err("lambda must be nonnegative and lr positive"));
        }
        Ok(())
    }

    /// `γ_k = γ₀ ρ^k`.
    pub fn gamma_at(&self, epoch: usize) -> f64 {
        self.gamma0 * math::powi(self.decay, epoch as i32)
    }
}

/// Frozen basis features at the collocation points.
#[derive(Debug, Clone, PartialEq)]
pub struct Collocation {
    pub interior_x: Vec<f64>,
    pub boundary_x: Vec<f64>,
    /// `φ, φ', φ''` at the interior points.
    pub interior: BasisFeatures,
    /// `φ` at the boundary points.
    pub boundary: BasisFeatures,
}

/// Draws interior points uniformly on `(-1, 1)` and evaluates `Φ` there via
/// interpolation of `ψ`, `ψ'` and `ψ''` from the grid.
pub fn collocation(
    model: &CompositeModel,
    basis: &ReducedBasis,
    grid: &Grid,
    problem: &dyn Problem,
    cfg: &OnlineConfig,
) -> Result<Collocation> {
    cfg.validate()?;
    if grid.len() != basis.n() {
        return Err(config_err("grid and basis sizes differ"));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let interior_x: Vec<f64> = (0..cfg.m1)
        .map(|_| loop {
            let x = -1.0 + 2.0 * rng.random::<f64>();
            if x > -1.0 {
                break x;
            }
        })
        .collect();
    let bpts = problem.boundary_points();
    if cfg.m2 > 0 && bpts.is_empty() {
        return Err(config_err("problem has no boundary points"));
    }
    let boundary_x: Vec<f64> = (0..cfg.m2).map(|j| bpts[j % bpts.len()]).collect();

    let at = |xs: &[f64], order: usize| -> Result<BasisFeatures> {
        let interp = grid.interpolation_matrix(xs)?;
        let mut ch = vec![interp.matmul(&basis.basis)];
        if order >= 1 {
            ch.push(interp.matmul(&basis.basis_dx));
            ch.push(interp.matmul(&basis.basis_dxx));
        }
        features_from_jet(&model.phi, &Jet::new(ch)?)
    };
    let interior = at(&interior_x, 2)?;
    let boundary = if boundary_x.is_empty() {
        BasisFeatures {
            jet: Jet::zeros(0, model.r(), 0),
        }
    } else {
        at(&boundary_x, 0)?
    };
    Ok(Collocation {
        interior_x,
        boundary_x,
        interior,
        boundary,
    })
}

/// `N[u](x)` for a pointwise jet of the approximation.
pub fn pinn_residual(problem: &dyn Problem, u: f64, ux: f64, uxx: f64, x: f64, mu: &[f64]) -> f64 {
    problem.residual(PointJet { u, ux, uxx }, x, mu)
}

/// Everything fixed during one adaptation besides `θ_U`.
#[derive(Clone, Copy)]
pub struct OnlineObjective<'a> {
    pub problem: &'a dyn Problem,
    pub colloc: &'a Collocation,
    pub u_spec: &'a MlpSpec,
    pub anchor: &'a FlatParams,
    pub mu: &'a [f64],
    pub lambda: f64,
}

impl OnlineObjective<'_> {
    pub fn loss(&self, theta_u: &[f64], gamma: f64) -> Result<f64> {
        Ok(self.eval(theta_u, gamma, false)?.0)
    }

    pub fn loss_grad(&self, theta_u: &[f64], gamma: f64) -> Result<(f64, Vec<f64>)> {
        self.eval(theta_u, gamma, true)
    }

    /// Weighted residual vector `ρ` with `loss = ‖ρ‖²`: interior residuals,
    /// `√λ`-scaled boundary residuals, then `√γ (θ_U − θ_U*)`.
    pub fn residuals(&self, theta_u: &[f64], gamma: f64) -> Result<Vec<f64>> {
        if self.anchor.len() != theta_u.len() {
            return Err(config_err("anchor and θ_U differ in length"));
        }
        let mut out = Vec::with_capacity(self.colloc.interior_x.len() + self.colloc.boundary_x.len() + theta_u.len());
        let (u, _) = forward_jet(self.u_spec, theta_u, &self.colloc.interior.jet)?;
        for (i, &x) in self.colloc.interior_x.iter().enumerate() {
            let jet = PointJet {
                u: u.channels[0][(i, 0)],
                ux: u.channels[1][(i, 0)],
                uxx: u.channels[2][(i, 0)],
            };
            out.push(self.problem.residual(jet, x, self.mu));
        }
        if !self.colloc.boundary_x.is_empty() {
            let (ub, _) = forward_jet(self.u_spec, theta_u, &self.colloc.boundary.jet)?;
            let w = math::sqrt(self.lambda);
            for (j, &x) in self.colloc.boundary_x.iter().enumerate() {
                out.push(w * self.problem.boundary_residual(ub.channels[0][(j, 0)], x, self.mu));
            }
        }
        let w = math::sqrt(gamma);
        out.extend(theta_u.iter().zip(&self.anchor.0).map(|(t, a)| w * (t - a)));
        Ok(out)
    }

    /// [`OnlineObjective::residuals`] and their Jacobian with respect to `θ_U`
    /// (one row per residual), by one reverse pass per collocation point.
    pub fn jacobian(&self, theta_u: &[f64], gamma: f64) -> Result<(Vec<f64>, Matrix)> {
        let rho = self.residuals(theta_u, gamma)?;
        let np = theta_u.len();
        let mut jac = Matrix::zeros(rho.len(), np);
        let mut row = 0;
        let interior = &self.colloc.interior.jet;
        for (i, &x) in self.colloc.interior_x.iter().enumerate() {
            let point = Jet::new(interior.channels.iter().map(|c| single_row(c, i)).collect())?;
            let (u, tape) = forward_jet(self.u_spec, theta_u, &point)?;
            let jet = PointJet {
                u: u.channels[0][(0, 0)],
                ux: u.channels[1][(0, 0)],
                uxx: u.channels[2][(0, 0)],
            };
            let d = self.problem.residual_partials(jet, x, self.mu);
            let adj = Jet::new(d.iter().map(|&v| Matrix::from_row_major(1, 1, vec![v]).expect("1x1")).collect())?;
            let (g, _) = backward_jet(self.u_spec, theta_u, &tape, &adj)?;
            jac.row_mut(row).copy_from_slice(&g);
            row += 1;
        }
        let w = math::sqrt(self.lambda);
        for (j, &x) in self.colloc.boundary_x.iter().enumerate() {
            let point = Jet::values(single_row(&self.colloc.boundary.jet.channels[0], j));
            let (u, tape) = forward_jet(self.u_spec, theta_u, &point)?;
            let slope = w * self.problem.boundary_partial(u.channels[0][(0, 0)], x, self.mu);
            let adj = Jet::values(Matrix::from_row_major(1, 1, vec![slope])?);
            let (g, _) = backward_jet(self.u_spec, theta_u, &tape, &adj)?;
            jac.row_mut(row).copy_from_slice(&g);
            row += 1;
        }
        let w = math::sqrt(gamma);
        for k in 0..np {
            jac[(row + k, k)] = w;
        }
        Ok((rho, jac))
    }

    fn eval(&self, theta_u: &[f64], gamma: f64, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        if self.anchor.len() != theta_u.len() {
            return Err(config_err("anchor and θ_U differ in length"));
        }
        let mut grad = vec![0.0; theta_u.len()];
        let mut loss = 0.0;

        let (u, tape) = forward_jet(self.u_spec, theta_u, &self.colloc.interior.jet)?;
        let m1 = self.colloc.interior_x.len();
        let mut adj = Jet::zeros(m1, 1, 2);
        for (i, &x) in self.colloc.interior_x.iter().enumerate() {
            let jet = PointJet {
                u: u.channels[0][(i, 0)],
                ux: u.channels[1][(i, 0)],
                uxx: u.channels[2][(i, 0)],
            };
            let res = self.problem.residual(jet, x, self.mu);
            loss += res * res;
            if with_grad {
                let d = self.problem.residual_partials(jet, x, self.mu);
                for (c, dc) in d.iter().enumerate() {
                    adj.channels[c][(i, 0)] = 2.0 * res * dc;
                }
            }
        }
        if with_grad {
            backward_jet_into(self.u_spec, theta_u, &tape, &adj, &mut grad)?;
        }

        if !self.colloc.boundary_x.is_empty() {
            let (ub, btape) = forward_jet(self.u_spec, theta_u, &self.colloc.boundary.jet)?;
            let mut badj = Matrix::zeros(self.colloc.boundary_x.len(), 1);
            for (j, &x) in self.colloc.boundary_x.iter().enumerate() {
                let val = ub.channels[0][(j, 0)];
                let res = self.problem.boundary_residual(val, x, self.mu);
                loss += self.lambda * res * res;
                badj[(j, 0)] = 2.0 * self.lambda * res * self.problem.boundary_partial(val, x, self.mu);
            }
            if with_grad {
                backward_jet_into(self.u_spec, theta_u, &btape, &Jet::values(badj), &mut grad)?;
            }
        }

        for ((g, &t), &a) in grad.iter_mut().zip(theta_u).zip(&self.anchor.0) {
            let d = t - a;
            loss += gamma * d * d;
            *g += 2.0 * gamma * d;
        }
        Ok((loss, grad))
    }
}

fn single_row(m: &Matrix, i: usize) -> Matrix {
    Matrix::from_row_major(1, m.cols(), m.row(i).to_vec()).expect("row length matches")
}

/// Starting point of the online optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialGuess {
    /// `θ_U = Θ(μ*)`.
    WarmStart,
    /// Glorot-uniform weights with the given seed.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationResult {
    pub theta_u: FlatParams,
    /// Number of optimizer updates applied.
    pub epochs_used: usize,
    /// Loss at each evaluated iterate, starting with the initial guess.
    pub loss_history: Vec<f64>,
    pub wall_time_s: f64,
    /// The loss reached `stop_tol`.
    pub converged: bool,
    /// A non-finite loss was hit; `theta_u` is then the best iterate seen.
    pub diverged: bool,
}

impl AdaptationResult {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// Refines `θ_U` for `mu_star`; `Φ` and `Θ` are only read.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    model: &CompositeModel,
    basis: &ReducedBasis,
    grid: &Grid,
    problem: &dyn Problem,
    mu_star: &[f64],
    cfg: &OnlineConfig,
    init: InitialGuess,
    clock: &dyn Clock,
) -> Result<AdaptationResult> {
    problem.check_mu(mu_star)?;
    let start = clock.now_s();
    let colloc = collocation(model, basis, grid, problem, cfg)?;
    let anchor = model.theta_u(mu_star)?;
    let objective = OnlineObjective {
        problem,
        colloc: &colloc,
        u_spec: &model.u_spec,
        anchor: &anchor,
        mu: mu_star,
        lambda: cfg.lambda,
    };
    let theta = match init {
        InitialGuess::WarmStart => anchor.clone(),
        InitialGuess::Random(seed) => {
            FlatParams::glorot(&model.u_spec, &mut Xoshiro256PlusPlus::seed_from_u64(seed))
        }
    };
    let mut result = run_adaptation(&objective, theta, cfg);
    result.wall_time_s = clock.now_s() - start;
    Ok(result)
}

/// The optimization loop behind [`adapt`], usable with any objective.
///
/// The tolerance is checked before every update, so `loss_history` holds one
/// entry more than the number of updates unless the loss became non-finite.
pub fn run_adaptation(objective: &OnlineObjective<'_>, init: FlatParams, cfg: &OnlineConfig) -> AdaptationResult {
    match cfg.optimizer {
        OnlineOptimizer::Adam => run_adam(objective, init, cfg),
        OnlineOptimizer::LevenbergMarquardt => run_levenberg_marquardt(objective, init, cfg),
    }
}

fn run_adam(objective: &OnlineObjective<'_>, init: FlatParams, cfg: &OnlineConfig) -> AdaptationResult {
    let mut theta = init;
    let mut adam = AdamState::new(theta.len(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, theta.clone());
    let mut converged = false;
    let mut diverged = false;
    let mut epochs = 0;
    loop {
        let evaluated = objective.loss_grad(&theta.0, cfg.gamma_at(epochs));
        let (loss, grad) = match evaluated {
            Ok((l, g)) if l.is_finite() && g.iter().all(|v| v.is_finite()) => (l, g),
            _ => {
                diverged = true;
                break;
            }
        };
        history.push(loss);
        if loss < best.0 {
            best = (loss, theta.clone());
        }
        if loss < cfg.stop_tol {
            converged = true;
            break;
        }
        if epochs >= cfg.max_epochs {
            break;
        }
        if adam.step(&mut theta.0, &grad).is_err() {
            diverged = true;
            break;
        }
        epochs += 1;
    }
    AdaptationResult {
        theta_u: if diverged { best.1 } else { theta },
        epochs_used: epochs,
        loss_history: history,
        wall_time_s: 0.0,
        converged,
        diverged,
    }
}

const LM_INITIAL_DAMPING: f64 = 1e-3;
const LM_MIN_DAMPING: f64 = 1e-12;
const LM_MAX_DAMPING: f64 = 1e12;

/// Each update solves `(JᵀJ + δ (I + diag JᵀJ)) Δ = −Jᵀρ`, raising `δ` until
/// the loss decreases and lowering it after a success. Stops early when no
/// damping gives a decrease.
fn run_levenberg_marquardt(objective: &OnlineObjective<'_>, init: FlatParams, cfg: &OnlineConfig) -> AdaptationResult {
    let mut theta = init;
    let mut history = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut epochs = 0;
    let mut damping = LM_INITIAL_DAMPING;
    loop {
        let gamma = cfg.gamma_at(epochs);
        let (rho, jac) = match objective.jacobian(&theta.0, gamma) {
            Ok((r, j)) if r.iter().chain(j.as_slice()).all(|v| v.is_finite()) => (r, j),
            _ => {
                diverged = true;
                break;
            }
        };
        let loss: f64 = rho.iter().map(|v| v * v).sum();
        history.push(loss);
        if loss < cfg.stop_tol {
            converged = true;
            break;
        }
        if epochs >= cfg.max_epochs {
            break;
        }
        let (m, n) = (jac.rows(), jac.cols());
        let mut normal = Matrix::zeros(n, n);
        gemm(n, m, n, 1.0, (jac.as_slice(), true), (jac.as_slice(), false), 0.0, normal.as_mut_slice());
        let rhs: Vec<f64> = jac.tr_matvec(&rho).iter().map(|v| -v).collect();
        let mut accepted = false;
        while damping <= LM_MAX_DAMPING {
            let mut a = normal.clone();
            for k in 0..n {
                a[(k, k)] += damping * (1.0 + normal[(k, k)]);
            }
            if let Some(step) = cholesky_solve(&a, &rhs) {
                let trial: Vec<f64> = theta.0.iter().zip(&step).map(|(t, s)| t + s).collect();
                if let Ok(l) = objective.loss(&trial, gamma) {
                    if l < loss {
                        theta = FlatParams(trial);
                        damping = (damping / 3.0).max(LM_MIN_DAMPING);
                        accepted = true;
                        break;
                    }
                }
            }
            damping *= 4.0;
        }
        if !accepted {
            break;
        }
        epochs += 1;
    }
    AdaptationResult {
        theta_u: theta,
        epochs_used: epochs,
        loss_history: history,
        wall_time_s: 0.0,
        converged,
        diverged,
    }
}
