//! Sparse random-coefficients logit demand estimation.
//!
//! The crate simulates markets, inverts mixed-logit shares, solves the
//! ℓ1-regularized GMM program `min ‖θ‖₁ s.t. ‖f̂(θ)‖∞ ≤ λ` by sequential linear
//! programming, and de-biases the estimate for coordinate-wise inference.

pub mod debias;
pub mod dgp;
pub mod error;
pub mod io;
pub mod lp;
pub mod model;
pub mod montecarlo;
pub mod moments;
pub mod quadrature;
pub mod rgmm;
mod serde_util;
pub mod shares;
pub mod stats;

pub use error::{BlpError, Result};
pub use model::{Dataset, MarketData, ModelConfig, Theta};
pub use quadrature::{QuadratureRule, QuadratureSpec};
pub use shares::InversionOptions;
