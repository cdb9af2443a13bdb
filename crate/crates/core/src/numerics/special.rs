use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal cumulative distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Modified Bessel function of the second kind of order one, `K₁(x)` for `x > 0`.
///
/// Ascending series for `x ≤ 2`, Steed's continued fraction (CF2) above.
pub fn bessel_k1(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain("bessel_k1", format!("x must be positive and finite, got {x}")));
    }
    if x <= 2.0 {
        Ok(k1_series(x))
    } else {
        Ok(k1_steed(x))
    }
}

// K₁(x) = 1/x + ln(x/2)·I₁(x) − (x/4)·Σ (ψ(k+1) + ψ(k+2)) (x²/4)^k / (k!(k+1)!)
fn k1_series(x: f64) -> f64 {
    let y = 0.25 * x * x;
    let mut term = 1.0; // y^k / (k! (k+1)!)
    let mut psi_k1 = -EULER_GAMMA; // ψ(k+1)
    let mut i1_sum = 0.0;
    let mut log_sum = 0.0;
    for k in 0..60 {
        let kf = k as f64;
        let psi_k2 = psi_k1 + 1.0 / (kf + 1.0);
        i1_sum += term;
        log_sum += (psi_k1 + psi_k2) * term;
        if term < 1e-18 * i1_sum {
            break;
        }
        psi_k1 = psi_k2;
        term *= y / ((kf + 1.0) * (kf + 2.0));
    }
    let i1 = 0.5 * x * i1_sum;
    1.0 / x + (0.5 * x).ln() * i1 - 0.25 * x * log_sum
}

fn k1_steed(x: f64) -> f64 {
    const EPS: f64 = 1e-17;
    let a1 = 0.25;
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..10_000 {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < EPS {
            break;
        }
    }
    h *= a1;
    let k0 = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
    k0 * (x + 0.5 - h) / x
}

#[cfg(test)]
mod tests {
    use super::*;

    // Taylor series of erf evaluated with compensated summation.
    fn erf_series(x: f64) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        let mut power = x; // x^(2n+1) / n!
        for n in 0..200 {
            let nf = n as f64;
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            let t = sign * power / (2.0 * nf + 1.0) - comp;
            let s = sum + t;
            comp = (s - sum) - t;
            sum = s;
            power *= x * x / (nf + 1.0);
            if power < 1e-30 {
                break;
            }
        }
        2.0 / PI.sqrt() * sum
    }

    // K₁(x) = ∫₀^∞ exp(−x cosh t) cosh t dt by the trapezoid rule, which is
    // spectrally accurate for this analytic, doubly-exponentially decaying integrand.
    pub(crate) fn k1_integral_oracle(x: f64) -> f64 {
        let h = 0.005;
        let mut sum = 0.5 * (-x).exp();
        let mut i = 1;
        loop {
            let t = i as f64 * h;
            let c = t.cosh();
            let term = (-x * c).exp() * c;
            sum += term;
            if term == 0.0 || term < sum * 1e-20 {
                break;
            }
            i += 1;
        }
        sum * h
    }

    #[test]
    fn cdf_at_zero_and_tail() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_cdf(10.0) - 1.0).abs() <= 1e-15);
        assert!(norm_cdf(-40.0) >= 0.0);
    }

    #[test]
    fn cdf_matches_erf_series() {
        for &x in &[0.5, 0.1, 1.0, 1.7] {
            let oracle = 0.5 * (1.0 + erf_series(x / 2f64.sqrt()));
            assert!((norm_cdf(x) - oracle).abs() <= 1e-15, "x={x}");
        }
    }

    #[test]
    fn cdf_reference_values() {
        // 30-digit reference values.
        let table = [
            (0.5, 0.691_462_461_274_013_103_637_704_610_608),
            (0.1, 0.539_827_837_277_028_983_668_933_907_702),
            (1.0, 0.841_344_746_068_542_948_585_232_545_632),
            (1.7, 0.955_434_537_241_456_956_335_948_949_349),
            (-0.8, 0.211_855_398_583_396_672_710_642_495_163),
        ];
        for (x, want) in table {
            assert!((norm_cdf(x) - want).abs() <= 1e-15, "x={x}");
        }
    }

    #[test]
    fn cdf_symmetry_and_monotone() {
        let mut prev = 0.0;
        for i in -800..=800 {
            let x = i as f64 * 0.01;
            assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() <= 1e-15, "x={x}");
            let c = norm_cdf(x);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn cdf_derivative_is_pdf() {
        let h = 1e-6;
        for i in -50..=50 {
            let x = i as f64 * 0.1;
            let fd = (norm_cdf(x + h) - norm_cdf(x - h)) / (2.0 * h);
            assert!((fd - norm_pdf(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn pdf_values() {
        assert!((norm_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
        assert_eq!(norm_pdf(1.7), norm_pdf(-1.7));
        let direct = (-0.5f64).exp() / (2.0 * PI).sqrt();
        assert!((norm_pdf(1.0) - direct).abs() <= 1e-16);
    }

    #[test]
    fn k1_domain() {
        assert!(bessel_k1(0.0).is_err());
        assert!(bessel_k1(-1.0).is_err());
        assert!(bessel_k1(f64::NAN).is_err());
    }

    #[test]
    fn k1_at_one_matches_integral() {
        let v = bessel_k1(1.0).unwrap();
        let o = k1_integral_oracle(1.0);
        assert!(((v - o) / o).abs() < 1e-13, "{v} vs {o}");
    }

    #[test]
    fn k1_large_x_asymptotic() {
        let x: f64 = 50.0;
        let asym = (PI / (2.0 * x)).sqrt() * (-x).exp() * (1.0 + 3.0 / (8.0 * x));
        let v = bessel_k1(x).unwrap();
        assert!(((v - asym) / asym).abs() < 1e-4);
        // The two-term form carries an O(x⁻²) remainder: −15/(128x²) ≈ 4.7e-5 here.
        let three_term = asym + (PI / (2.0 * x)).sqrt() * (-x).exp() * (-15.0 / (128.0 * x * x));
        assert!(((v - three_term) / three_term).abs() < 1e-6);
    }

    #[test]
    fn k1_small_x_limit() {
        let x = 1e-6;
        assert!((x * bessel_k1(x).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn k1_log_grid_matches_integral() {
        for i in 0..=50 {
            let x = 10f64.powf(-3.0 + 5.0 * i as f64 / 50.0);
            let v = bessel_k1(x).unwrap();
            let o = k1_integral_oracle(x);
            assert!(((v - o) / o).abs() < 1e-10, "x={x}: {v} vs {o}");
        }
        // both sides of the series / continued-fraction switch
        for &x in &[1.999_999, 2.0, 2.000_001, 700.0] {
            let v = bessel_k1(x).unwrap();
            let o = k1_integral_oracle(x);
            assert!(((v - o) / o).abs() < 1e-12, "x={x}: {v} vs {o}");
        }
    }
}
