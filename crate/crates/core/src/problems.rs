//! Parametrized steady problems `N(u; μ) = 0` on `[-1, 1]` and the concrete
//! Burgers' instance with a manufactured exact solution.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{config_err, Error, Result};
use crate::grid::Grid;
use crate::math;

/// Value and first two spatial derivatives of a field at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointJet {
    pub u: f64,
    pub ux: f64,
    pub uxx: f64,
}

/// A steady parametrized boundary-value problem in one space dimension.
///
/// The residual and boundary operators are pointwise in `(u, u_x, u_xx)`, which
/// is what the physics-informed online loss needs, together with their partial
/// derivatives for backpropagation.
pub trait Problem: Sync {
    /// Per-component parameter box `[lo, hi]`.
    fn mu_domain(&self) -> &[(f64, f64)];

    fn mu_dim(&self) -> usize {
        self.mu_domain().len()
    }

    /// High-fidelity solution with derivatives at `x`.
    fn solution(&self, x: f64, mu: &[f64]) -> PointJet;

    /// Interior residual `N[u](x)`.
    fn residual(&self, jet: PointJet, x: f64, mu: &[f64]) -> f64;

    /// Partials of [`Problem::residual`] with respect to `(u, u_x, u_xx)`.
    fn residual_partials(&self, jet: PointJet, x: f64, mu: &[f64]) -> [f64; 3];

    /// Points making up the spatial boundary.
    fn boundary_points(&self) -> &[f64];

    /// Boundary residual `B[u](x)`.
    fn boundary_residual(&self, u: f64, x: f64, mu: &[f64]) -> f64;

    /// `∂B/∂u`.
    fn boundary_partial(&self, u: f64, x: f64, mu: &[f64]) -> f64;

    /// Rejects parameter vectors of the wrong length or outside the domain.
    fn check_mu(&self, mu: &[f64]) -> Result<()> {
        let dom = self.mu_domain();
        if mu.len() != dom.len() {
            return Err(config_err(alloc::format!(
                "parameter has {} components, problem expects {}",
                mu.len(),
                dom.len()
            )));
        }
        for (component, (&value, &(lo, hi))) in mu.iter().zip(dom).enumerate() {
            if !(lo..=hi).contains(&value) {
                return Err(Error::Domain {
                    component,
                    value,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    /// High-fidelity solution sampled on a grid.
    fn sample_solution(&self, grid: &Grid, mu: &[f64]) -> Result<Vec<f64>> {
        self.check_mu(mu)?;
        Ok(grid.points().iter().map(|&x| self.solution(x, mu).u).collect())
    }

    /// First spatial derivative of the high-fidelity solution on a grid.
    fn sample_solution_dx(&self, grid: &Grid, mu: &[f64]) -> Result<Vec<f64>> {
        self.check_mu(mu)?;
        Ok(grid.points().iter().map(|&x| self.solution(x, mu).ux).collect())
    }
}

/// I.i.d. uniform draws from the problem's parameter box.
pub fn sample_params(problem: &dyn Problem, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(config_err("parameter sample count must be at least 1"));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            problem
                .mu_domain()
                .iter()
                .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                .collect()
        })
        .collect())
}

/// Which closed form supplies the Burgers' source term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceForm {
    /// The closed-form trigonometric expression as commonly printed for this
    /// benchmark (with its frequency symbol read as `κ`).
    Printed,
    /// `s = u·u_x − u_xx` evaluated from the analytic derivatives of the exact
    /// solution, so the exact solution satisfies the equation by construction.
    Manufactured,
}

impl SourceForm {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceForm::Printed => "printed",
            SourceForm::Manufactured => "manufactured",
        }
    }
}

const BURGERS_DOMAIN: [(f64, f64); 2] = [(1.0, 10.0), (1.0, 10.0)];
const BURGERS_BOUNDARY: [f64; 2] = [-1.0, 1.0];

/// Residual tolerance used when deciding whether the printed source term is
/// consistent with the exact solution.
pub const SOURCE_CONSISTENCY_TOL: f64 = 1e-8;

/// `u·u_x − u_xx = s(x, μ)` on `[-1, 1]` with homogeneous Dirichlet data and
/// exact solution `u = (1 + μ₁x)·sin(−κμ₂x/3)·(x² − 1)`, `μ ∈ [1, 10]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Burgers {
    kappa: f64,
    source_form: SourceForm,
}

/// Builds the Burgers' problem, checking the printed source term against the
/// exact solution and falling back to the manufactured source if they disagree.
pub fn burgers_problem(kappa: f64) -> Result<Burgers> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(config_err(alloc::format!("kappa must be positive, got {kappa}")));
    }
    let printed = Burgers {
        kappa,
        source_form: SourceForm::Printed,
    };
    let source_form = if printed.max_exact_residual(64, 0x5eed) < SOURCE_CONSISTENCY_TOL {
        SourceForm::Printed
    } else {
        SourceForm::Manufactured
    };
    Ok(Burgers { kappa, source_form })
}

impl Burgers {
    /// Forces a particular source form, bypassing the consistency check.
    pub fn with_source_form(kappa: f64, source_form: SourceForm) -> Result<Self> {
        let mut b = burgers_problem(kappa)?;
        b.source_form = source_form;
        Ok(b)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn source_form(&self) -> SourceForm {
        self.source_form
    }

    /// Exact solution and its first two derivatives.
    pub fn exact(&self, x: f64, mu: &[f64]) -> PointJet {
        let (m1, m2) = (mu[0], mu[1]);
        let w = self.kappa * m2 / 3.0;
        // u = a(x)·s(x)·c(x) with a = 1 + μ₁x, s = sin(−ωx), c = x² − 1.
        let (a, a1) = (1.0 + m1 * x, m1);
        let (sn, cs) = (math::sin(-w * x), math::cos(-w * x));
        let (s, s1, s2) = (sn, -w * cs, -w * w * sn);
        let (c, c1, c2) = (x * x - 1.0, 2.0 * x, 2.0);
        PointJet {
            u: a * s * c,
            ux: a1 * s * c + a * s1 * c + a * s * c1,
            uxx: a * s2 * c + a * s * c2 + 2.0 * (a1 * s1 * c + a1 * s * c1 + a * s1 * c1),
        }
    }

    /// Source term `s(x, μ)` in the configured form.
    pub fn source(&self, x: f64, mu: &[f64]) -> f64 {
        match self.source_form {
            SourceForm::Manufactured => {
                let e = self.exact(x, mu);
                e.u * e.ux - e.uxx
            }
            SourceForm::Printed => self.printed_source(x, mu),
        }
    }

    fn printed_source(&self, x: f64, mu: &[f64]) -> f64 {
        let (m1, m2, h) = (mu[0], mu[1], self.kappa);
        let a = 1.0 + m1 * x;
        let c = x * x - 1.0;
        let arg = 2.0 * h * m2 * x / 3.0;
        a * a * (6.0 * x * x - 2.0 - 2.0 * h * h * m2 * m2 / 9.0 * c * c) * math::cos(arg)
            + 2.0 * h * m2 / 3.0 * a * c * (m1 * c + 2.0 * x * a) * math::sin(arg)
            - (6.0 * x * x - 2.0) * a * a
    }

    /// Largest `|N[u_ex]|` over `count` seeded random `(x, μ)` pairs.
    pub fn max_exact_residual(&self, count: usize, seed: u64) -> f64 {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let x = -1.0 + 2.0 * rng.random::<f64>();
                let mu = [1.0 + 9.0 * rng.random::<f64>(), 1.0 + 9.0 * rng.random::<f64>()];
                libm::fabs(self.residual(self.exact(x, &mu), x, &mu))
            })
            .fold(0.0, f64::max)
    }
}

impl Problem for Burgers {
    fn mu_domain(&self) -> &[(f64, f64)] {
        &BURGERS_DOMAIN
    }

    fn solution(&self, x: f64, mu: &[f64]) -> PointJet {
        self.exact(x, mu)
    }

    fn residual(&self, jet: PointJet, x: f64, mu: &[f64]) -> f64 {
        jet.u * jet.ux - jet.uxx - self.source(x, mu)
    }

    fn residual_partials(&self, jet: PointJet, _x: f64, _mu: &[f64]) -> [f64; 3] {
        [jet.ux, jet.u, -1.0]
    }

    fn boundary_points(&self) -> &[f64] {
        &BURGERS_BOUNDARY
    }

    fn boundary_residual(&self, u: f64, _x: f64, _mu: &[f64]) -> f64 {
        u
    }

    fn boundary_partial(&self, _u: f64, _x: f64, _mu: &[f64]) -> f64 {
        1.0
    }
}
