//! Normalised Black-Scholes prices with zero rates, and implied total variance.
//!
//! Everything is expressed through `BS(k, v) = N(d₊) − eᵏ N(d₋)` with
//! `d± = −k/v ± v/2`, where `k = log(K/S)` is the log-moneyness and `v` the
//! total volatility `σ√(T−t)`; `BS(k, 0) = (1 − eᵏ)₊`.

use crate::numerics::{norm_cdf, norm_pdf};
use crate::{Error, Result};

/// Below this total volatility the intrinsic branch is used.
const V_INTRINSIC: f64 = 1e-14;

/// A normalised call quote `BS(k, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsQuote {
    pub k: f64,
    pub v: f64,
    pub price: f64,
}

impl BsQuote {
    pub fn new(k: f64, v: f64) -> Result<Self> {
        Ok(Self {
            k,
            v,
            price: bs_normalized(k, v)?,
        })
    }
}

/// `(1 − eᵏ)₊`.
pub fn intrinsic(k: f64) -> f64 {
    (-k.exp_m1()).max(0.0)
}

/// Normalised call price `BS(k, v)` for log-moneyness `k` and total volatility `v ≥ 0`.
pub fn bs_normalized(k: f64, v: f64) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::domain("bs_normalized", format!("total volatility must be >= 0, got {v}")));
    }
    if !k.is_finite() {
        return Err(Error::domain("bs_normalized", format!("log-moneyness must be finite, got {k}")));
    }
    Ok(bs_unchecked(k, v))
}

pub(crate) fn bs_unchecked(k: f64, v: f64) -> f64 {
    let lower = intrinsic(k);
    (lower + time_value(k, v)).min(1.0)
}

/// `BS(k, v) − (1 − eᵏ)₊`, evaluated without cancellation against the intrinsic part.
fn time_value(k: f64, v: f64) -> f64 {
    if v < V_INTRINSIC {
        return 0.0;
    }
    let d_plus = -k / v + 0.5 * v;
    let d_minus = d_plus - v;
    let tv = if k < 0.0 {
        // in the money: the out-of-the-money put
        k.exp() * norm_cdf(-d_minus) - norm_cdf(-d_plus)
    } else {
        norm_cdf(d_plus) - k.exp() * norm_cdf(d_minus)
    };
    tv.max(0.0)
}

/// `∂BS/∂v = n(d₊)`.
pub fn vega_normalized(k: f64, v: f64) -> f64 {
    if v < V_INTRINSIC {
        return 0.0;
    }
    norm_pdf(-k / v + 0.5 * v)
}

fn check_positive(op: &'static str, name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("{name} must be positive and finite, got {x}")))
    }
}

/// Undiscounted call price for total implied variance `omega`.
pub fn call_price(spot: f64, strike: f64, omega: f64) -> Result<f64> {
    check_positive("call_price", "spot", spot)?;
    check_positive("call_price", "strike", strike)?;
    if !(omega >= 0.0) {
        return Err(Error::domain("call_price", format!("total variance must be >= 0, got {omega}")));
    }
    Ok(spot * bs_unchecked((strike / spot).ln(), omega.sqrt()))
}

/// Put price by put-call parity.
pub fn put_price(spot: f64, strike: f64, omega: f64) -> Result<f64> {
    let call = call_price(spot, strike, omega)?;
    Ok((call - spot + strike).clamp(0.0, strike))
}

/// Total implied variance `ω` with `BS(k, √ω) = price`.
///
/// Safeguarded Newton on `v = √ω`: Newton steps are taken when they stay inside
/// the current bracket, otherwise the bracket is bisected.
pub fn implied_total_variance(k: f64, price: f64) -> Result<f64> {
    const OP: &str = "implied_total_variance";
    if !k.is_finite() || !price.is_finite() {
        return Err(Error::domain(OP, format!("non-finite input k={k}, price={price}")));
    }
    let lower = intrinsic(k);
    if price < lower {
        return Err(Error::domain(
            OP,
            format!("price {price} is below the lower bound (1 - e^k)+ = {lower}"),
        ));
    }
    if price >= 1.0 {
        return Err(Error::domain(OP, format!("price {price} is not below the upper bound 1")));
    }
    if price == lower {
        return Ok(0.0);
    }

    // Newton on log time value, which is close to linear in v even deep in the wings.
    let log_target = (price - lower).ln();
    let objective = |v: f64| {
        let tv = time_value(k, v);
        let g = tv.ln() - log_target;
        let slope = if tv > 0.0 { vega_normalized(k, v) / tv } else { f64::INFINITY };
        (g, slope)
    };

    let mut lo = 0.0;
    let mut hi = 20.0;
    while objective(hi).0 < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::NonConvergence {
                op: OP,
                reason: format!("price {price} too close to 1 to bracket"),
            });
        }
    }

    let mut v = (2.0 * k.abs()).sqrt().max(0.5).clamp(lo, hi);
    let mut converged = false;
    for _ in 0..500 {
        let (g, slope) = objective(v);
        if g == 0.0 {
            converged = true;
            break;
        }
        if g > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            converged = true;
            break;
        }
        let newton = v - g / slope;
        v = if slope.is_finite() && slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    if !converged {
        return Err(Error::NonConvergence {
            op: OP,
            reason: format!("no convergence for k={k}, price={price}"),
        });
    }
    Ok(v * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // E[(e^Z − e^k)₊] with Z ~ N(−v²/2, v²), by the trapezoid rule on ±12σ.
    fn lognormal_oracle(k: f64, v: f64, points: usize) -> f64 {
        let mu = -0.5 * v * v;
        let (a, b) = (mu - 12.0 * v, mu + 12.0 * v);
        let h = (b - a) / (points - 1) as f64;
        let density = |z: f64| (-(z - mu) * (z - mu) / (2.0 * v * v)).exp() / (v * (2.0 * std::f64::consts::PI).sqrt());
        let mut sum = 0.0;
        for i in 0..points {
            let z = a + i as f64 * h;
            let w = if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
            sum += w * (z.exp() - k.exp()).max(0.0) * density(z);
        }
        sum * h
    }

    #[test]
    fn zero_variance_branch() {
        assert_eq!(bs_normalized(0.3, 0.0).unwrap(), 0.0);
        assert!((bs_normalized(-0.3, 0.0).unwrap() - (1.0 - (-0.3f64).exp())).abs() < 1e-16);
        assert!(bs_normalized(0.0, -1e-3).is_err());
    }

    #[test]
    fn at_the_money() {
        let want = 2.0 * norm_cdf(0.5) - 1.0;
        assert!((bs_normalized(0.0, 1.0).unwrap() - want).abs() < 1e-16);
    }

    #[test]
    fn lognormal_expectation() {
        let oracle = lognormal_oracle(-0.1, 0.4, 10_000_001);
        let v = bs_normalized(-0.1, 0.4).unwrap();
        assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
    }

    #[test]
    fn continuity_at_zero() {
        for &k in &[-0.5, 0.0, 0.5] {
            let a = bs_normalized(k, 0.0).unwrap();
            let b = bs_normalized(k, 1e-10).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn call_and_put_examples() {
        assert_eq!(call_price(1.0, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(call_price(2.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(call_price(1.0, 1.0, 0.25).unwrap(), bs_normalized(0.0, 0.5).unwrap());
        assert_eq!(put_price(1.0, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(put_price(1.0, 2.0, 0.0).unwrap(), 1.0);
        assert!((put_price(1.0, 1.0, 0.25).unwrap() - call_price(1.0, 1.0, 0.25).unwrap()).abs() < 1e-16);
        assert!(call_price(0.0, 1.0, 0.1).is_err());
        assert!(call_price(1.0, -1.0, 0.1).is_err());
        assert!(put_price(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn inversion_examples() {
        let atm = 2.0 * norm_cdf(0.5) - 1.0;
        assert!((implied_total_variance(0.0, atm).unwrap() - 1.0).abs() < 1e-12);
        for &k in &[-1.0, 0.0, 0.4] {
            assert_eq!(implied_total_variance(k, intrinsic(k)).unwrap(), 0.0);
        }
        let p = bs_normalized(0.2, 0.7).unwrap();
        assert!((implied_total_variance(0.2, p).unwrap() - 0.49).abs() < 1e-10);
    }

    #[test]
    fn inversion_bounds_are_named() {
        let low = implied_total_variance(-0.5, 0.1).unwrap_err().to_string();
        assert!(low.contains("lower bound"), "{low}");
        let high = implied_total_variance(0.0, 1.0).unwrap_err().to_string();
        assert!(high.contains("upper bound"), "{high}");
    }

    #[test]
    fn vega_is_positive_on_grid() {
        for i in -30..=30 {
            let k = i as f64 * 0.1;
            let mut prev = bs_normalized(k, 0.01).unwrap();
            for j in 2..=400 {
                let v = j as f64 * 0.01;
                let p = bs_normalized(k, v).unwrap();
                assert!(p >= prev, "k={k} v={v}");
                prev = p;
            }
            assert!(vega_normalized(k, 0.5) > 0.0);
        }
    }

    proptest! {
        #[test]
        fn price_bounds(k in -5.0f64..5.0, v in 0.0f64..10.0) {
            let p = bs_normalized(k, v).unwrap();
            prop_assert!(p >= intrinsic(k) && p <= 1.0);
        }

        #[test]
        fn parity(spot in 0.1f64..10.0, strike in 0.1f64..10.0, omega in 0.0f64..4.0) {
            let c = call_price(spot, strike, omega).unwrap();
            let p = put_price(spot, strike, omega).unwrap();
            prop_assert!((c - p - (spot - strike)).abs() <= 1e-14 * spot.max(strike));
        }
    }
}
