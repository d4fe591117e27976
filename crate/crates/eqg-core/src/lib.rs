//! Equilibrium asset pricing with consumption habit under exponential
//! preferences, in the exponential-quadratic-Gaussian (EQG) regime.
//!
//! An agent trades `n` stocks driven by a `d0`-dimensional common noise,
//! consumes against an internal habit stock, and faces a liability that is a
//! quadratic form of a common Ornstein-Uhlenbeck factor `x0` and an
//! idiosyncratic one `xi`. The certainty-equivalent value process is then a
//! quadratic form of the factors whose coefficients solve a backward matrix
//! Riccati system; the market-clearing risk premium and the optimal
//! investment/consumption pair come out in closed form on top of it.
//!
//! Module map:
//! - [`model`] — scalar preference/habit parameters, the habit Riccati
//!   function ζ, the driver offsets g and g̃, and the smallness calculator.
//! - [`riccati`] — the backward coefficient ODE system: right-hand side,
//!   fixed-step RK4 integrator, CSV round trip.
//! - [`factors`] — factor-path simulation, liability evaluation, habit and
//!   wealth integration.
//! - [`equilibrium`] — value/martingale slices (Y, Z⁰, Zⁱ), the equilibrium
//!   risk premium ϑ, optimal strategies p*, c*, π*.
//! - [`verify`] — executable checks: pathwise BSDE residuals, the O(1/N)
//!   market-clearing rate, Monte-Carlo optimality, variance bounds.

pub mod curve;
pub mod equilibrium;
pub mod error;
pub mod factors;
pub mod mesh;
pub mod model;
pub mod riccati;
pub mod rng;
pub mod verify;

pub use curve::Curve;
pub use error::{EqgError, Result};
pub use mesh::Mesh;
pub use model::{ModelParams, SmallnessReport, ZetaConstants};
pub use riccati::{FactorParams, LiabilityCoeffs, RiccatiSolution, RiccatiState};
