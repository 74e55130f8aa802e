//! Nonlinear, non-intrusive reduced-basis surrogates for parametrized PDEs.
//!
//! The offline pipeline builds a POD basis from snapshots, maps it through a
//! small dimension-reduction network `Φ`, and reconstructs solutions with a
//! shallow network `U` whose weights are produced per parameter by a
//! hypernetwork `Θ`. Online, the weights of `U` are refined for a single
//! parameter value by minimizing a physics-informed residual loss, starting
//! from the hypernetwork's prediction.
//!
//! The crate is `no_std` (with `alloc`); file formats, timing and the
//! command-line driver live in the `nlrb` companion crate.
//!
//! Module map:
//! - [`grid`]: collocation grid, differentiation matrices, quadrature, interpolation
//! - [`pod`]: snapshot matrix, SVD, reduced basis and projection
//! - [`net`]: dense MLPs with second-order jets, reverse-mode gradients and Adam
//! - [`problems`]: the problem abstraction and the parametrized Burgers' equation
//! - [`model`]: the composite surrogate and its Sobolev-norm offline training
//! - [`online`]: residual-driven adaptation of the reconstruction network
//! - [`baselines`]: POD-NN and optimal linear projection
//! - [`eval`]: error metrics, aggregates and histograms

#![no_std]

extern crate alloc;

pub mod baselines;
mod error;
pub mod eval;
pub mod grid;
pub mod linalg;
mod math;
pub mod model;
pub mod net;
pub mod online;
pub mod pod;
pub mod problems;

pub use error::{Error, Result};

/// Wall-clock source used to time online adaptations.
///
/// The core crate has no access to a system clock; callers with `std`
/// supply one. [`NoClock`] reports zero elapsed time.
pub trait Clock {
    /// Seconds since an arbitrary fixed origin.
    fn now_s(&self) -> f64;
}

/// A clock that never advances.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_s(&self) -> f64 {
        0.0
    }
}
