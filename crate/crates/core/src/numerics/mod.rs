//! Special functions, quadrature and seeded Gaussian streams.

mod quadrature;
mod rng;
mod special;

pub use quadrature::{
    integrate, integrate_to_infinity, integrate_with_budget, truncation_point, QuadratureResult,
    DEFAULT_MAX_INTERVALS,
};
pub use rng::{gaussian, RngStream};
pub use special::{bessel_k1, norm_cdf, norm_pdf};
