//! Symmetric SSVI implied-volatility smiles.
//!
//! The crate covers the static side (SVI/SSVI slices, calendar and butterfly
//! checks with the exact symmetric boundary `B(θ)`), the necessary joint
//! dynamics of the SSVI level `θ` and curvature `φ` driven by a stock with
//! stochastic variance, and the resulting implied-volatility bubbles: the
//! stopping time at which a path leaves the no-butterfly domain, Monte-Carlo
//! checks of the optional-stopping pricing identity, and its infinite-horizon
//! Bessel-integral form.

pub mod blackscholes;
pub mod bubble;
pub mod dynamics;
mod error;
pub mod numerics;
pub mod ssvi;

pub use error::{Error, Result};
