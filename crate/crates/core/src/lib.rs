//! Reducible invariant tori of quasi-periodically forced reversible systems
//! in the reversible KAM context 2.
//!
//! The crate is organised bottom-up:
//!
//! * [`revlin`]: involutions, infinitesimally reversible matrices, spectrum
//!   classification and versal-type unfoldings;
//! * [`dioph`]: affine Diophantine checks, the nondegeneracy quantities
//!   `ρ^Q`, `Ξ_l^Q` and empirical measure estimates;
//! * [`systems`]: the model format, order conditions, reversibility checks
//!   and the `Zz` elimination;
//! * [`torus`]: the counterterm/Floquet conjugacy solver;
//! * [`herman`]: parameter extension, key systems, sweeps over the ball Γ and
//!   measure bookkeeping;
//! * [`cli`]: the batch driver behind the `kamrev2` binary.
//!
//! Numerical kernels that evaluate fields and residuals are generic over
//! [`Scalar`]; the aliases below fix the usual `f64` instantiation.

pub mod cli;
pub mod dioph;
pub mod error;
pub mod herman;
pub mod linalg;
pub mod revlin;
pub mod scalar;
pub mod series;
pub mod systems;
pub mod torus;

pub use error::{Error, Result};
pub use scalar::{Dual, Scalar};

/// Fourier–Taylor field with `f64` coefficients.
pub type Field = series::FourierTaylorField<f64>;
/// Fourier–Taylor field with `f32` coefficients.
pub type Field32 = series::FourierTaylorField<f32>;
/// Dual number over `f64`, used for exact Jacobian columns.
pub type Dual64 = scalar::Dual<f64>;
