//! SVI and SSVI smiles and their static-arbitrage checks.
//!
//! For a symmetric SSVI slice (`ρ = 0`) absence of butterfly arbitrage is
//! exactly `(θφ)² ≤ B(θ)`, where `B(θ) = A(θ)` on `(0, 4)` and `16` beyond.
//! `B` increases from `0` to `16` on `[0, 4]`; its inverse is the barrier that
//! stops the bubble dynamics in [`crate::bubble`].

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Raw SVI parameters `(a, b, ρ, m, σ)` of a single slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SviParams {
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub m: f64,
    pub sigma: f64,
}

impl SviParams {
    pub fn new(a: f64, b: f64, rho: f64, m: f64, sigma: f64) -> Result<Self> {
        const OP: &str = "SviParams";
        if !(b >= 0.0) {
            return Err(Error::domain(OP, format!("b must be >= 0, got {b}")));
        }
        if !(rho.abs() < 1.0) {
            return Err(Error::domain(OP, format!("rho must lie in (-1, 1), got {rho}")));
        }
        if !(sigma > 0.0) {
            return Err(Error::domain(OP, format!("sigma must be > 0, got {sigma}")));
        }
        if !a.is_finite() || !m.is_finite() {
            return Err(Error::domain(OP, "a and m must be finite"));
        }
        Ok(Self { a, b, rho, m, sigma })
    }
}

/// One SSVI slice: ATM total variance `θ`, correlation `ρ`, curvature `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsviSlice {
    pub theta: f64,
    pub rho: f64,
    pub phi: f64,
}

impl SsviSlice {
    pub fn new(theta: f64, rho: f64, phi: f64) -> Result<Self> {
        const OP: &str = "SsviSlice";
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::domain(OP, format!("theta must be > 0, got {theta}")));
        }
        if !(rho.abs() < 1.0) {
            return Err(Error::domain(OP, format!("rho must lie in (-1, 1), got {rho}")));
        }
        if !(phi > 0.0) || !phi.is_finite() {
            return Err(Error::domain(OP, format!("phi must be > 0, got {phi}")));
        }
        Ok(Self { theta, rho, phi })
    }

    /// The symmetric slice with `θφ = ψ`.
    pub fn symmetric(theta: f64, psi: f64) -> Result<Self> {
        Self::new(theta, 0.0, psi / theta)
    }

    /// `ρ̄ = √(1 − ρ²)`.
    pub fn rho_bar(&self) -> f64 {
        (1.0 - self.rho * self.rho).sqrt()
    }

    pub fn psi(&self) -> f64 {
        self.theta * self.phi
    }
}

/// SVI total variance. Negative values are possible and returned as is.
pub fn svi_total_variance(k: f64, p: &SviParams) -> f64 {
    let x = k - p.m;
    p.a + p.b * (p.rho * x + (x * x + p.sigma * p.sigma).sqrt())
}

pub fn ssvi_total_variance(k: f64, s: &SsviSlice) -> f64 {
    let pk = s.phi * k;
    let rb = s.rho_bar();
    0.5 * s.theta * (1.0 + s.rho * pk + ((pk + s.rho).powi(2) + rb * rb).sqrt())
}

/// `½(θ + √(θ² + ψ²k²))`: the symmetric smile written with `ψ = θφ`, valid down to `θ = 0`.
pub fn symmetric_total_variance(k: f64, theta: f64, psi: f64) -> f64 {
    0.5 * (theta + (theta * theta + psi * psi * k * k).sqrt())
}

fn zeta(theta: f64) -> f64 {
    let u = 2.0 / (1.0 - 0.25 * theta);
    u + (u * u + u).sqrt()
}

/// `A(θ)` on `(0, 4)`.
pub fn capital_a(theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < 4.0) {
        return Err(Error::domain("capital_A", format!("theta must lie in (0, 4), got {theta}")));
    }
    let z = zeta(theta);
    Ok(16.0 * theta * z * (z + 1.0) / (8.0 * (z - 2.0) + theta * z * (z - 1.0)))
}

/// Exact no-butterfly boundary `B(θ)`; `B(θ) = 0` for `θ ≤ 0`.
pub fn capital_b(theta: f64) -> f64 {
    if theta >= 4.0 {
        16.0
    } else if theta > 0.0 {
        capital_a(theta).expect("theta in (0, 4)")
    } else {
        0.0
    }
}

/// Inverse of `B` from `[0, 16]` onto `[0, 4]`, by bisection.
///
/// `B` flattens quadratically at `θ = 4`, so `binverse(B(θ))` recovers `θ`
/// only to `~ε/B′(θ)` within a few `1e-5` of 4.
pub fn binverse(y: f64) -> Result<f64> {
    if !(0.0..=16.0).contains(&y) {
        return Err(Error::domain("binverse", format!("argument must lie in [0, 16], got {y}")));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    if y == 16.0 {
        return Ok(4.0);
    }
    let (mut lo, mut hi) = (0.0f64, 4.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if capital_b(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // pick the endpoint closer in value
    if (capital_b(lo) - y).abs() <= (capital_b(hi) - y).abs() {
        Ok(lo)
    } else {
        Ok(hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckMethod {
    Exact,
    Sufficient,
    DensityScan,
}

/// Outcome of a butterfly-arbitrage check on one slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageReport {
    pub butterfly_ok: bool,
    /// `B(θ)` for the exact check, the sufficient-condition bound on `θφ` otherwise.
    pub boundary_value: f64,
    pub psi_squared: f64,
    pub density_min: Option<f64>,
    pub density_argmin: Option<f64>,
    pub method: CheckMethod,
}

/// Exact symmetric check `ψ² ≤ B(θ)`.
pub fn butterfly_exact_symmetric(theta: f64, psi: f64) -> ArbitrageReport {
    let boundary = capital_b(theta);
    let psi_squared = psi * psi;
    ArbitrageReport {
        butterfly_ok: psi_squared <= boundary,
        boundary_value: boundary,
        psi_squared,
        density_min: None,
        density_argmin: None,
        method: CheckMethod::Exact,
    }
}

/// Bound `min(4/(1+|ρ|), 2√(θ/(1+|ρ|)))` on `θφ` of the sufficient condition.
pub fn sufficient_bound(s: &SsviSlice) -> f64 {
    let r = 1.0 + s.rho.abs();
    (4.0 / r).min(2.0 * (s.theta / r).sqrt())
}

pub fn butterfly_sufficient(s: &SsviSlice) -> bool {
    s.psi() <= sufficient_bound(s)
}

/// Calendar-spread check for an SSVI surface sampled at increasing maturities.
///
/// Requires `θ` nondecreasing between consecutive samples and
/// `0 ≤ ∂θ(θφ(θ)) ≤ (1 + ρ̄)/ρ² · φ(θ)` at every sampled `θ`, the derivative
/// taken by central differences with relative step `1e-5`. For `ρ = 0` the upper
/// bound is infinite.
pub fn calendar_check<F: Fn(f64) -> f64>(
    maturities: &[f64],
    thetas: &[f64],
    phi: F,
    rho: f64,
) -> Result<bool> {
    if maturities.len() != thetas.len() {
        return Err(Error::Input(format!(
            "{} maturities but {} theta values",
            maturities.len(),
            thetas.len()
        )));
    }
    if maturities.len() < 3 {
        return Err(Error::Input(format!(
            "calendar check needs at least 3 grid points, got {}",
            maturities.len()
        )));
    }
    if maturities.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("maturities must be strictly increasing".into()));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::domain("calendar_check", format!("rho must lie in (-1, 1), got {rho}")));
    }
    if thetas.windows(2).any(|w| w[1] < w[0]) {
        return Ok(false);
    }
    let rho_bar = (1.0 - rho * rho).sqrt();
    let psi = |t: f64| t * phi(t);
    for &theta in thetas {
        if !(theta > 0.0) {
            return Err(Error::Input(format!("theta must be positive, got {theta}")));
        }
        let h = 1e-5 * theta;
        let slope = (psi(theta + h) - psi(theta - h)) / (2.0 * h);
        if slope < 0.0 {
            return Ok(false);
        }
        if rho != 0.0 && slope > (1.0 + rho_bar) / (rho * rho) * phi(theta) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// A total-variance slice `k ↦ ω(k)` with first and second derivatives.
///
/// The default derivatives are central differences.
pub trait TotalVarianceSlice {
    fn total_variance(&self, k: f64) -> f64;

    fn first_derivative(&self, k: f64) -> f64 {
        let h = 1e-5 * k.abs().max(1.0);
        (self.total_variance(k + h) - self.total_variance(k - h)) / (2.0 * h)
    }

    fn second_derivative(&self, k: f64) -> f64 {
        let h = 1e-4 * k.abs().max(1.0);
        (self.total_variance(k + h) - 2.0 * self.total_variance(k) + self.total_variance(k - h)) / (h * h)
    }
}

impl TotalVarianceSlice for SsviSlice {
    fn total_variance(&self, k: f64) -> f64 {
        ssvi_total_variance(k, self)
    }

    fn first_derivative(&self, k: f64) -> f64 {
        let x = self.phi * k + self.rho;
        let r = (x * x + 1.0 - self.rho * self.rho).sqrt();
        0.5 * self.theta * self.phi * (self.rho + x / r)
    }

    fn second_derivative(&self, k: f64) -> f64 {
        let x = self.phi * k + self.rho;
        let rb2 = 1.0 - self.rho * self.rho;
        let r = (x * x + rb2).sqrt();
        0.5 * self.theta * self.phi * self.phi * rb2 / (r * r * r)
    }
}

impl TotalVarianceSlice for SviParams {
    fn total_variance(&self, k: f64) -> f64 {
        svi_total_variance(k, self)
    }

    fn first_derivative(&self, k: f64) -> f64 {
        let x = k - self.m;
        self.b * (self.rho + x / (x * x + self.sigma * self.sigma).sqrt())
    }

    fn second_derivative(&self, k: f64) -> f64 {
        let x = k - self.m;
        let s2 = self.sigma * self.sigma;
        self.b * s2 / (x * x + s2).powf(1.5)
    }
}

/// Wraps a plain function as a slice with finite-difference derivatives.
pub struct FnSlice<F>(pub F);

impl<F: Fn(f64) -> f64> TotalVarianceSlice for FnSlice<F> {
    fn total_variance(&self, k: f64) -> f64 {
        (self.0)(k)
    }
}

/// `g(k) = (1 − kω′/(2ω))² − (ω′²/4)(1/ω + 1/4) + ω″/2`.
///
/// The risk-neutral density of `log(S_T/S)` at `k` is `g(k)·n(d₋)/√ω`, so the slice
/// is free of butterfly arbitrage iff `g ≥ 0` everywhere.
pub fn density<S: TotalVarianceSlice + ?Sized>(k: f64, slice: &S) -> Result<f64> {
    let w = slice.total_variance(k);
    if !(w > 0.0) {
        return Err(Error::domain("density", format!("total variance must be > 0 at k={k}, got {w}")));
    }
    let w1 = slice.first_derivative(k);
    let w2 = slice.second_derivative(k);
    let a = 1.0 - k * w1 / (2.0 * w);
    Ok(a * a - 0.25 * w1 * w1 * (1.0 / w + 0.25) + 0.5 * w2)
}

/// Minimum of `g` on the grid `k_min, k_min + step, …, k_max` and where it is attained.
pub fn density_scan<S: TotalVarianceSlice + ?Sized>(
    slice: &S,
    k_min: f64,
    k_max: f64,
    step: f64,
) -> Result<(f64, f64)> {
    if !(k_max > k_min) || !(step > 0.0) {
        return Err(Error::Input(format!("bad scan grid [{k_min}, {k_max}] step {step}")));
    }
    let n = ((k_max - k_min) / step).round() as usize;
    let mut best = (f64::INFINITY, k_min);
    for i in 0..=n {
        let k = (k_min + i as f64 * step).min(k_max);
        let g = density(k, slice)?;
        if g < best.0 {
            best = (g, k);
        }
    }
    Ok(best)
}

/// Slack allowed below zero before a density scan reports arbitrage.
pub const DENSITY_SCAN_TOLERANCE: f64 = 1e-9;

/// Butterfly verdict from a density scan of an SSVI slice.
pub fn butterfly_density_scan(s: &SsviSlice, k_min: f64, k_max: f64, step: f64) -> Result<ArbitrageReport> {
    let (g_min, k_at) = density_scan(s, k_min, k_max, step)?;
    Ok(ArbitrageReport {
        butterfly_ok: g_min >= -DENSITY_SCAN_TOLERANCE,
        boundary_value: if s.rho == 0.0 { capital_b(s.theta) } else { sufficient_bound(s) },
        psi_squared: s.psi() * s.psi(),
        density_min: Some(g_min),
        density_argmin: Some(k_at),
        method: CheckMethod::DensityScan,
    })
}
