//! Implied-volatility bubbles of the symmetric SSVI dynamics.
//!
//! Along the reduced dynamics `θ` drifts down while `ψ = θφ` stays fixed, so a
//! path eventually leaves the no-butterfly domain `ψ² ≤ B(θ)`. It is stopped at
//!
//! ```text
//! τ = inf{t ≤ T : θ_t < B⁻¹(ψ²)}
//! ```
//!
//! Up to `τ` every call is a martingale, which gives the pricing identity
//! `S₀BS(k₀, √ϖ₀) = E[S_τ BS(k_τ, √ϖ_τ)]` with `ϖ = ½(θ + √(θ² + ψ²k²))`.
//! [`master_equation_mc`] checks it by simulation; [`bs_bubble_rhs`] evaluates
//! its `T → ∞` limit under constant variance as a Bessel-kernel integral.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::blackscholes::bs_normalized;
use crate::dynamics::{PathStepper, SimConfig};
use crate::numerics::{bessel_k1, integrate, truncation_point};
use crate::ssvi::{binverse, symmetric_total_variance};
use crate::{Error, Result};

/// Constants of the infinite-horizon identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BubbleParams {
    pub psi: f64,
    pub theta0: f64,
    pub barrier: f64,
    /// `η = 1/ψ − ψ/16`.
    pub eta: f64,
    /// `a = (θ0 − barrier)/ψ`.
    pub a: f64,
}

impl BubbleParams {
    /// Uses `B⁻¹(ψ²)` unless `barrier` overrides it with some level in `(0, θ0)`.
    pub fn new(theta0: f64, psi: f64, barrier: Option<f64>) -> Result<Self> {
        if !(psi > 0.0 && psi < 4.0) {
            return Err(Error::Config(format!("psi must lie in (0, 4), got {psi}")));
        }
        let barrier = match barrier {
            Some(b) => {
                if !(b > 0.0 && b < theta0) {
                    return Err(Error::Config(format!("barrier override must lie in (0, theta0), got {b}")));
                }
                b
            }
            None => binverse(psi * psi)?,
        };
        if !(theta0 > barrier) || !theta0.is_finite() {
            return Err(Error::Config(format!("theta0 = {theta0} must exceed the barrier {barrier}")));
        }
        Ok(Self {
            psi,
            theta0,
            barrier,
            eta: 1.0 / psi - psi / 16.0,
            a: (theta0 - barrier) / psi,
        })
    }
}

/// Master-equation check for one strike.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BubbleReport {
    pub strike: f64,
    pub k0: f64,
    pub lhs_price: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    /// `(mc_mean − lhs_price)/mc_se`; 0 when both the gap and the standard error vanish.
    pub z_score: f64,
    pub n_paths: usize,
    pub n_crossed: usize,
}

/// First index with `θ[i] < barrier`.
pub fn detect_stop(theta: &[f64], barrier: f64) -> Option<usize> {
    theta.iter().position(|&t| t < barrier)
}

/// `S·BS(k, √ϖ)` with `ϖ = ½(θ + √(θ² + ψ²k²))`.
pub fn stopped_option_value(s: f64, k: f64, theta: f64, psi: f64) -> f64 {
    let w = symmetric_total_variance(k, theta, psi).max(0.0);
    s * bs_normalized(k, w.sqrt()).unwrap_or(f64::NAN)
}

/// Mean and standard error, accumulated about the first sample.
fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let shift = xs[0];
    let d = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    let mean = shift + d;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - shift - d) * (x - shift - d)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo check of `S₀BS(k₀, √ϖ₀) = E[S_τ BS(k_τ, √ϖ_τ)]`.
///
/// Paths are stopped at the first grid point where `θ` falls below the barrier
/// (or at `T`). All strikes share the same paths.
pub fn master_equation_mc(config: &SimConfig, strikes: &[f64], barrier: Option<f64>) -> Result<Vec<BubbleReport>> {
    config.validate()?;
    let params = BubbleParams::new(config.theta0, config.psi, barrier)?;
    if strikes.is_empty() {
        return Err(Error::Input("no strikes given".into()));
    }
    if let Some(k) = strikes.iter().find(|&&k| !(k > 0.0) || !k.is_finite()) {
        return Err(Error::Input(format!("strikes must be positive, got {k}")));
    }
    let psi = config.psi;
    let per_path: Vec<(bool, Vec<f64>)> = (0..config.paths as u64)
        .into_par_iter()
        .map(|index| {
            let mut stepper = PathStepper::new(config, index);
            let mut state = stepper.state();
            let mut crossed = state.theta < params.barrier;
            while !crossed {
                match stepper.step() {
                    Some(next) => {
                        state = next;
                        crossed = state.theta < params.barrier;
                    }
                    None => break,
                }
            }
            let values = strikes
                .iter()
                .map(|&strike| stopped_option_value(state.s, (strike / state.s).ln(), state.theta, psi))
                .collect();
            (crossed, values)
        })
        .collect();

    let n_crossed = per_path.iter().filter(|p| p.0).count();
    let mut reports = Vec::with_capacity(strikes.len());
    for (j, &strike) in strikes.iter().enumerate() {
        let values: Vec<f64> = per_path.iter().map(|p| p.1[j]).collect();
        let (mc_mean, mc_se) = mean_and_se(&values);
        let k0 = (strike / config.s0).ln();
        let lhs_price = stopped_option_value(config.s0, k0, config.theta0, psi);
        let gap = mc_mean - lhs_price;
        let z_score = if mc_se > 0.0 {
            gap / mc_se
        } else if gap == 0.0 {
            0.0
        } else {
            gap.signum() * f64::INFINITY
        };
        reports.push(BubbleReport {
            strike,
            k0,
            lhs_price,
            mc_mean,
            mc_se,
            z_score,
            n_paths: config.paths,
            n_crossed,
        });
    }
    Ok(reports)
}

/// `√((4η²+1)/(y²+a²))·K₁(√((4η²+1)(y²+a²))/2)`.
pub fn inner_k1_closed_form(y: f64, a: f64, eta: f64) -> Result<f64> {
    check_inner_args(a, eta)?;
    let r = (y * y + a * a).sqrt();
    let c = (4.0 * eta * eta + 1.0).sqrt();
    Ok(c / r * bessel_k1(0.5 * c * r)?)
}

fn check_inner_args(a: f64, eta: f64) -> Result<()> {
    if !(a > 0.0) || !(eta > 0.0) || !a.is_finite() || !eta.is_finite() {
        return Err(Error::domain("inner_k1_integral", format!("need a > 0 and eta > 0, got a={a}, eta={eta}")));
    }
    Ok(())
}

/// `∫₀^∞ e^{−(η²+¼)t/2} e^{−(y²+a²)/(2t)} t⁻² dt` by adaptive quadrature, to relative
/// accuracy `tol`.
pub fn inner_k1_quadrature(y: f64, a: f64, eta: f64, tol: f64) -> Result<f64> {
    check_inner_args(a, eta)?;
    let alpha = 0.5 * (eta * eta + 0.25);
    let beta = 0.5 * (y * y + a * a);
    // t = e^s: integrand exp(−αe^s − βe^{−s} − s), peaked near s = ½log(β/α)
    let f = |s: f64| (-alpha * s.exp() - beta * (-s).exp() - s).exp();
    let centre = 0.5 * (beta / alpha).ln();
    let peak = f(centre);
    let mut lo = centre - 1.0;
    while f(lo) > 1e-30 * peak {
        lo -= 1.0;
    }
    let mut hi = centre + 1.0;
    while f(hi) > 1e-30 * peak {
        hi += 1.0;
    }
    // a rough value sets the absolute target
    let rough = integrate(f, lo, hi, 1e-3 * peak)?.value;
    Ok(integrate(f, lo, hi, 0.1 * tol * rough)?.value)
}

/// The inner integral of the infinite-horizon identity.
///
/// Computes both the quadrature and the Bessel closed form and returns the latter
/// once they agree to relative accuracy `tol`.
pub fn inner_k1_integral(y: f64, a: f64, eta: f64, tol: f64) -> Result<f64> {
    let closed = inner_k1_closed_form(y, a, eta)?;
    let quad = inner_k1_quadrature(y, a, eta, tol)?;
    if ((quad - closed) / closed).abs() > tol {
        return Err(Error::NonConvergence {
            op: "inner_k1_integral",
            reason: format!("quadrature {quad} and closed form {closed} differ by more than {tol:e}"),
        });
    }
    Ok(closed)
}

/// Infinite-horizon value of the ATM-normalised call under constant variance:
///
/// ```text
/// (a e^{ηa}/2π) ∫ e^{y/2} BS(k − y, √ϖ_β(k − y)) · c/√(y²+a²) · K₁(c√(y²+a²)/2) dy
/// ```
///
/// with `c = √(4η²+1)`, `ϖ_β(x) = ½(β + √(β² + ψ²x²))` and `a = (θ0 − β)/ψ`.
/// It equals `BS(k, √ϖ₀)` for every `β ∈ (0, θ0)`. The integrand decays like
/// `e^{−(c−1)y/2}` as `y → ∞` and `e^{−(c+1)|y|/2}` as `y → −∞`; the domain is cut
/// at `±Y` with `Y = 40·2ⁿ` once the tail bound is below `tol/10`.
pub fn bs_bubble_rhs(k: f64, theta0: f64, psi: f64, beta: f64, tol: f64) -> Result<f64> {
    if !k.is_finite() {
        return Err(Error::domain("bs_bubble_rhs", format!("k must be finite, got {k}")));
    }
    if !(tol > 0.0) {
        return Err(Error::domain("bs_bubble_rhs", format!("tolerance must be positive, got {tol}")));
    }
    let p = BubbleParams::new(theta0, psi, Some(beta))?;
    let c = (4.0 * p.eta * p.eta + 1.0).sqrt();
    let a = p.a;
    let prefactor = a * (p.eta * a).exp() / (2.0 * PI);

    let kernel = |y: f64| -> f64 {
        let r = (y * y + a * a).sqrt();
        c / r * bessel_k1(0.5 * c * r).unwrap_or(f64::NAN)
    };
    let integrand = |y: f64| -> f64 {
        let x = k - y;
        let w = symmetric_total_variance(x, beta, psi);
        (0.5 * y).exp() * bs_normalized(x, w.sqrt()).unwrap_or(f64::NAN) * kernel(y)
    };

    // K₁(z) ≤ √(π/(2z)) e^{−z} (1 + 3/(8z)), BS ≤ 1, √(y²+a²) ≥ |y|
    let tail = |y: f64, rate: f64| -> f64 {
        let z = 0.5 * c * y;
        prefactor * (c / y) * (PI / (2.0 * z)).sqrt() * (1.0 + 3.0 / (8.0 * z)) * 2.0 / rate * (-0.5 * rate * y).exp()
    };
    let upper_rate = c - 1.0;
    let lower_rate = c + 1.0;
    let both_tails = |y: f64| tail(y, upper_rate) + tail(y, lower_rate);
    let big_y = truncation_point(0.0, 0.1 * tol, 40.0, &both_tails).map_err(|_| Error::NonConvergence {
        op: "bs_bubble_rhs",
        reason: "tail bound not achievable".into(),
    })?;

    let budget = 0.45 * tol / prefactor;
    let left = integrate(integrand, -big_y, 0.0, 0.5 * budget)?;
    let right = integrate(integrand, 0.0, big_y, 0.5 * budget)?;
    Ok(prefactor * (left.value + right.value))
}

/// `p(t) = a/√(2πt³) e^{−a²/(2t)}`, the density of the first time a standard
/// Brownian motion reaches level `a`. Zero for `t ≤ 0`.
pub fn first_passage_density(t: f64, a: f64) -> f64 {
    if !(t > 0.0) {
        return 0.0;
    }
    a / (2.0 * PI * t * t * t).sqrt() * (-a * a / (2.0 * t)).exp()
}

/// `P(τ_a ≤ t) = erfc(a/√(2t))`.
pub fn first_passage_cdf(t: f64, a: f64) -> f64 {
    if !(t > 0.0) {
        return 0.0;
    }
    libm::erfc(a / (2.0 * t).sqrt())
}
