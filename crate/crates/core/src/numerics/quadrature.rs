//! Adaptive Gauss–Kronrod (7/15) quadrature with global bisection.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::{Error, Result};

/// Kronrod abscissae on [−1, 1]; odd indices are the 7-point Gauss nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Default cap on the number of subintervals.
pub const DEFAULT_MAX_INTERVALS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureResult {
    pub value: f64,
    pub abs_error_estimate: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut gauss = fc * WG[3];
    let mut kronrod = fc * WGK[7];
    let mut abs_sum = kronrod.abs();
    let mut fv1 = [0.0; 7];
    let mut fv2 = [0.0; 7];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        kronrod += WGK[j] * (f1 + f2);
        abs_sum += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * kronrod;
    let mut asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = kronrod * half;
    let res_abs = abs_sum * half.abs();
    let res_asc = asc * half.abs();
    let mut error = ((kronrod - gauss) * half).abs();
    if res_asc != 0.0 && error != 0.0 {
        error = res_asc * (200.0 * error / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(50.0 * f64::EPSILON * res_abs);
    }
    Segment { a, b, value, error }
}

/// Integrate `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<QuadratureResult> {
    integrate_with_budget(f, a, b, tol, DEFAULT_MAX_INTERVALS)
}

pub fn integrate_with_budget<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    tol: f64,
    max_intervals: usize,
) -> Result<QuadratureResult> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::domain("integrate", format!("need finite a < b, got [{a}, {b}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::domain("integrate", format!("tolerance must be positive, got {tol}")));
    }
    let first = kronrod15(&f, a, b);
    let mut evaluations = 15;
    let mut total_error = first.error;
    let mut heap = BinaryHeap::new();
    heap.push(first);
    // Segments too narrow to bisect further; their error is final.
    let mut frozen_error = 0.0;

    while total_error > tol {
        if heap.len() >= max_intervals {
            return Err(Error::NonConvergence {
                op: "integrate",
                reason: format!(
                    "{max_intervals} subintervals exhausted with error estimate {total_error:e} > {tol:e}"
                ),
            });
        }
        let Some(worst) = heap.pop() else {
            break;
        };
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b || (worst.b - worst.a) < 4.0 * f64::EPSILON * mid.abs() {
            frozen_error += worst.error;
            if frozen_error > tol {
                return Err(Error::NonConvergence {
                    op: "integrate",
                    reason: format!("roundoff limit reached near x = {mid}"),
                });
            }
            continue;
        }
        let left = kronrod15(&f, worst.a, mid);
        let right = kronrod15(&f, mid, worst.b);
        evaluations += 30;
        total_error += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
    }
    let value = heap.iter().map(|s| s.value).sum::<f64>();
    let error = heap.iter().map(|s| s.error).sum::<f64>() + frozen_error;
    Ok(QuadratureResult {
        value,
        abs_error_estimate: error,
        evaluations,
    })
}

/// Integrate `f` over `[a, ∞)`.
///
/// `tail_bound(x)` must bound `∫ₓ^∞ |f|`. The domain is truncated at the first
/// `a + L·2ⁿ` (starting from `L = initial_length`) where the bound falls below
/// `tol / 10`; the bound is added to the reported error.
pub fn integrate_to_infinity<F, T>(
    f: F,
    a: f64,
    tol: f64,
    initial_length: f64,
    tail_bound: T,
) -> Result<QuadratureResult>
where
    F: Fn(f64) -> f64,
    T: Fn(f64) -> f64,
{
    let upper = truncation_point(a, tol / 10.0, initial_length, &tail_bound)?;
    let tail = tail_bound(upper);
    let mut res = integrate(f, a, upper, tol - tail)?;
    res.abs_error_estimate += tail;
    Ok(res)
}

/// Smallest `a + L·2ⁿ` at which `tail_bound` drops to `target`.
pub fn truncation_point<T: Fn(f64) -> f64>(a: f64, target: f64, initial_length: f64, tail_bound: &T) -> Result<f64> {
    let mut length = initial_length;
    for _ in 0..64 {
        let upper = a + length;
        let bound = tail_bound(upper);
        if bound.is_finite() && bound <= target {
            return Ok(upper);
        }
        length *= 2.0;
    }
    Err(Error::NonConvergence {
        op: "truncation",
        reason: format!("tail bound never fell below {target:e}"),
    })
}
