//! Stock, variance and SSVI-level paths.
//!
//! The stock follows `dS = S√v dB^S`. Along consistent symmetric SSVI dynamics
//! `ψ = θφ` is constant and the ATM total variance satisfies
//!
//! ```text
//! dθ = (ψ² − 16)/16 · v dt − ψ√v dB
//! ```
//!
//! with `B` independent of `B^S`. The production generator uses this reduced
//! equation and sets `φ = ψ/θ`; [`simulate_joint_euler`] discretises the
//! coupled `(θ, φ)` system instead and only serves as a cross-check.
//!
//! Every path owns three counter-based streams addressed by the path index:
//! [`STOCK_CHANNEL`] for `B^S`, [`THETA_CHANNEL`] for `B` (which doubles as
//! `±B^v` under Heston) and [`AUX_CHANNEL`] for the binary-switch coin.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{gaussian, RngStream};
use crate::ssvi::binverse;
use crate::{Error, Result};

pub const STOCK_CHANNEL: u64 = 0;
pub const THETA_CHANNEL: u64 = 1;
pub const AUX_CHANNEL: u64 = 2;

/// Instantaneous variance `v` of the stock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum VarianceModel {
    /// `v ≡ v0`. `v0 = 0` freezes everything.
    Constant { v0: f64 },
    /// `dv = κ(v̄ − v)dt + ξ√v dB^v` with `B^θ = theta_corr · B^v`, `theta_corr = ±1`.
    Heston {
        v0: f64,
        kappa: f64,
        vbar: f64,
        xi: f64,
        theta_corr: f64,
    },
    /// On `T = 1`: `v0` on `[0, 1/3)`, then `v0(1+ε₁), v0(1−ε₁)` on the next two
    /// thirds if `B_{1/3} > 0`, else `v0(1−ε₂), v0(1+ε₂)`.
    BinarySwitch { v0: f64, eps1: f64, eps2: f64 },
}

impl VarianceModel {
    pub fn validate(&self, maturity: f64) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            VarianceModel::Constant { v0 } => {
                if !(v0 >= 0.0) || !v0.is_finite() {
                    return bad(format!("constant variance v0 must be >= 0, got {v0}"));
                }
            }
            VarianceModel::Heston {
                v0,
                kappa,
                vbar,
                xi,
                theta_corr,
            } => {
                for (name, x) in [("v0", v0), ("kappa", kappa), ("vbar", vbar), ("xi", xi)] {
                    if !(x > 0.0) || !x.is_finite() {
                        return bad(format!("heston {name} must be > 0, got {x}"));
                    }
                }
                if theta_corr != 1.0 && theta_corr != -1.0 {
                    return bad(format!("heston theta_corr must be +1 or -1, got {theta_corr}"));
                }
            }
            VarianceModel::BinarySwitch { v0, eps1, eps2 } => {
                if !(v0 > 0.0) || !v0.is_finite() {
                    return bad(format!("binary_switch v0 must be > 0, got {v0}"));
                }
                for (name, e) in [("eps1", eps1), ("eps2", eps2)] {
                    if !(e > 0.0 && e < 1.0) {
                        return bad(format!("binary_switch {name} must lie in (0, 1), got {e}"));
                    }
                }
                if maturity != 1.0 {
                    return bad(format!("binary_switch is only defined for maturity 1, got {maturity}"));
                }
            }
        }
        Ok(())
    }

    pub fn v0(&self) -> f64 {
        match *self {
            VarianceModel::Constant { v0 } => v0,
            VarianceModel::Heston { v0, .. } => v0,
            VarianceModel::BinarySwitch { v0, .. } => v0,
        }
    }

    /// Feller condition `2κv̄ ≥ ξ²`; `None` for non-Heston models.
    pub fn feller(&self) -> Option<bool> {
        match *self {
            VarianceModel::Heston { kappa, vbar, xi, .. } => Some(2.0 * kappa * vbar >= xi * xi),
            _ => None,
        }
    }

    fn is_heston(&self) -> bool {
        matches!(self, VarianceModel::Heston { .. })
    }
}

fn default_s0() -> f64 {
    1.0
}

/// Monte-Carlo configuration shared by the simulators and the bubble engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub maturity: f64,
    pub theta0: f64,
    pub psi: f64,
    #[serde(default = "default_s0")]
    pub s0: f64,
    pub variance: VarianceModel,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.maturity > 0.0) || !self.maturity.is_finite() {
            return bad(format!("maturity must be > 0, got {}", self.maturity));
        }
        if !(self.theta0 > 0.0) || !self.theta0.is_finite() {
            return bad(format!("theta0 must be > 0, got {}", self.theta0));
        }
        if !(self.psi > 0.0 && self.psi < 4.0) {
            return bad(format!("psi must lie in (0, 4), got {}", self.psi));
        }
        if !(self.s0 > 0.0) || !self.s0.is_finite() {
            return bad(format!("s0 must be > 0, got {}", self.s0));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.paths == 0 {
            return bad("paths must be >= 1".into());
        }
        self.variance.validate(self.maturity)?;
        let barrier = self.barrier();
        if !(self.theta0 > barrier) {
            return bad(format!(
                "theta0 = {} must exceed the barrier B^-1(psi^2) = {barrier}",
                self.theta0
            ));
        }
        Ok(())
    }

    /// `B⁻¹(ψ²)`: below this level the symmetric slice admits butterfly arbitrage.
    pub fn barrier(&self) -> f64 {
        binverse(self.psi * self.psi).unwrap_or(f64::NAN)
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.steps as f64
    }

    /// Drift coefficient `(ψ² − 16)/16` of the reduced θ equation.
    pub fn theta_drift(&self) -> f64 {
        (self.psi * self.psi - 16.0) / 16.0
    }
}

/// Uniform time grid `t_i = T·i/steps`.
pub fn time_grid(maturity: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| grid_time(maturity, steps, i)).collect()
}

fn grid_time(maturity: f64, steps: usize, i: usize) -> f64 {
    maturity * i as f64 / steps as f64
}

/// The three per-path streams.
#[derive(Debug, Clone)]
pub struct PathStreams {
    pub stock: RngStream,
    pub theta: RngStream,
    pub aux: RngStream,
}

impl PathStreams {
    pub fn new(seed: u64, path: u64) -> Self {
        Self {
            stock: RngStream::with_channel(seed, path, STOCK_CHANNEL),
            theta: RngStream::with_channel(seed, path, THETA_CHANNEL),
            aux: RngStream::with_channel(seed, path, AUX_CHANNEL),
        }
    }

    /// The stream driving `v`: `B^θ` under Heston, the auxiliary one otherwise.
    pub fn variance_stream(&mut self, model: &VarianceModel) -> &mut RngStream {
        if model.is_heston() {
            &mut self.theta
        } else {
            &mut self.aux
        }
    }
}

/// Step-by-step variance generator.
#[derive(Debug, Clone)]
struct VarianceStepper {
    model: VarianceModel,
    maturity: f64,
    steps: usize,
    dt: f64,
    sqrt_dt: f64,
    // Euler state for Heston (may dip below zero), current level otherwise
    state: f64,
    // middle and last third levels for the binary switch
    levels: [f64; 2],
}

impl VarianceStepper {
    fn new(model: VarianceModel, maturity: f64, steps: usize, stream: &mut RngStream) -> Self {
        let mut levels = [0.0; 2];
        if let VarianceModel::BinarySwitch { v0, eps1, eps2 } = model {
            // B_{1/3} ~ N(0, 1/3): only its sign matters
            levels = if gaussian(stream) > 0.0 {
                [v0 * (1.0 + eps1), v0 * (1.0 - eps1)]
            } else {
                [v0 * (1.0 - eps2), v0 * (1.0 + eps2)]
            };
        }
        let dt = maturity / steps as f64;
        Self {
            model,
            maturity,
            steps,
            dt,
            sqrt_dt: dt.sqrt(),
            state: model.v0(),
            levels,
        }
    }

    fn switch_level(&self, t: f64) -> f64 {
        if 3.0 * t < 1.0 {
            self.model.v0()
        } else if 3.0 * t < 2.0 {
            self.levels[0]
        } else {
            self.levels[1]
        }
    }

    /// `∫₀ᵗ v` for the binary switch, exact at `t = 1`.
    fn switch_integral(&self, t: f64) -> f64 {
        let v0 = self.model.v0();
        if t >= 1.0 || 3.0 * t < 1.0 {
            v0 * t
        } else if 3.0 * t < 2.0 {
            v0 / 3.0 + self.levels[0] * (t - 1.0 / 3.0)
        } else {
            (v0 + self.levels[0]) / 3.0 + self.levels[1] * (t - 2.0 / 3.0)
        }
    }

    /// `v` at grid index `i` (the current one before [`advance`](Self::advance)).
    fn current(&self, i: usize) -> f64 {
        match self.model {
            VarianceModel::BinarySwitch { .. } => self.switch_level(grid_time(self.maturity, self.steps, i)),
            _ => self.state.max(0.0),
        }
    }

    /// Moves from `t_i` to `t_{i+1}`; returns `ΔV_i` and, under Heston, the `B^v` increment.
    fn advance(&mut self, i: usize, stream: &mut RngStream) -> (f64, f64) {
        match self.model {
            VarianceModel::Constant { v0 } => (v0 * self.dt, 0.0),
            VarianceModel::Heston { kappa, vbar, xi, .. } => {
                let vp = self.state.max(0.0);
                let dw = self.sqrt_dt * gaussian(stream);
                self.state += kappa * (vbar - vp) * self.dt + xi * vp.sqrt() * dw;
                (vp * self.dt, dw)
            }
            VarianceModel::BinarySwitch { .. } => {
                let a = self.switch_integral(grid_time(self.maturity, self.steps, i));
                let b = self.switch_integral(grid_time(self.maturity, self.steps, i + 1));
                (b - a, 0.0)
            }
        }
    }
}

/// A sampled variance path on the uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VariancePath {
    pub t: Vec<f64>,
    /// `v(t_i) ≥ 0`.
    pub v: Vec<f64>,
    /// `V(t_i) = ∫₀^{t_i} v`: exact for constant and switching variance, trapezoid under Heston.
    pub integrated: Vec<f64>,
    /// Variance `ΔV_i` used by the stock and θ schemes on `[t_i, t_{i+1}]`;
    /// `v_i⁺Δt` under Heston.
    pub step_variance: Vec<f64>,
    /// Heston only: increments of `B^v`.
    pub driver: Vec<f64>,
}

/// Samples `v` on `steps` uniform intervals of `[0, maturity]`.
///
/// Heston uses full-truncation Euler. The binary switch draws one normal for
/// the sign of `B_{1/3}` and requires `maturity = 1`.
pub fn variance_path(
    model: &VarianceModel,
    maturity: f64,
    steps: usize,
    stream: &mut RngStream,
) -> Result<VariancePath> {
    if steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    if !(maturity > 0.0) {
        return Err(Error::Config(format!("maturity must be > 0, got {maturity}")));
    }
    model.validate(maturity)?;
    let mut stepper = VarianceStepper::new(*model, maturity, steps, stream);
    let mut v = Vec::with_capacity(steps + 1);
    let mut step_variance = Vec::with_capacity(steps);
    let mut driver = Vec::new();
    for i in 0..steps {
        v.push(stepper.current(i));
        let (dv, dw) = stepper.advance(i, stream);
        step_variance.push(dv);
        if model.is_heston() {
            driver.push(dw);
        }
    }
    v.push(stepper.current(steps));

    let t = time_grid(maturity, steps);
    let integrated = match model {
        VarianceModel::Heston { .. } => {
            let dt = maturity / steps as f64;
            let mut acc = vec![0.0; steps + 1];
            for i in 0..steps {
                acc[i + 1] = acc[i] + 0.5 * dt * (v[i] + v[i + 1]);
            }
            acc
        }
        VarianceModel::Constant { v0 } => t.iter().map(|&s| v0 * s).collect(),
        VarianceModel::BinarySwitch { .. } => t.iter().map(|&s| stepper.switch_integral(s)).collect(),
    };
    Ok(VariancePath {
        t,
        v,
        integrated,
        step_variance,
        driver,
    })
}

/// One step of the reduced θ equation; `noise` is the increment of `∫√v dB`.
#[inline]
fn theta_step(theta: f64, drift: f64, psi: f64, dv: f64, noise: f64) -> f64 {
    theta + drift * dv - psi * noise
}

/// One exact log-normal step of the stock.
#[inline]
fn stock_step(s: f64, dv: f64, z: f64) -> f64 {
    s * (dv.sqrt() * z - 0.5 * dv).exp()
}

fn theta_noise(model: &VarianceModel, dv: f64, dw: f64, vp: f64, stream: &mut RngStream) -> f64 {
    match *model {
        VarianceModel::Heston { theta_corr, .. } => theta_corr * vp.sqrt() * dw,
        _ => dv.sqrt() * gaussian(stream),
    }
}

/// θ along the reduced equation, `θ[0] = θ0`.
///
/// Under Heston the increments of `B^θ` are `theta_corr` times those of `B^v`
/// and `stream` is not used. Negative values are kept.
pub fn simulate_theta_reduced(config: &SimConfig, path: &VariancePath, stream: &mut RngStream) -> Vec<f64> {
    let drift = config.theta_drift();
    let mut theta = Vec::with_capacity(path.step_variance.len() + 1);
    let mut th = config.theta0;
    theta.push(th);
    for (i, &dv) in path.step_variance.iter().enumerate() {
        let dw = path.driver.get(i).copied().unwrap_or(0.0);
        let noise = theta_noise(&config.variance, dv, dw, path.v[i], stream);
        th = theta_step(th, drift, config.psi, dv, noise);
        theta.push(th);
    }
    theta
}

/// `φ = ψ/θ` where `θ > 0`, NaN elsewhere.
pub fn phi_from_theta(theta: &[f64], psi: f64) -> Vec<f64> {
    theta.iter().map(|&t| if t > 0.0 { psi / t } else { f64::NAN }).collect()
}

/// Euler–Maruyama for the coupled system
///
/// ```text
/// dθ = (p² − 16)/16 · v dt − p√v dB
/// dφ = (16 + 16φ²θ − p²) φ v/(16θ) dt + φ²√v dB,      p = θφ
/// ```
///
/// started at `(θ0, ψ/θ0)` with one shared `dB`.
pub fn simulate_joint_euler(
    config: &SimConfig,
    path: &VariancePath,
    stream: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = path.step_variance.len();
    let mut noise = Vec::with_capacity(n);
    for (i, &dv) in path.step_variance.iter().enumerate() {
        let dw = path.driver.get(i).copied().unwrap_or(0.0);
        noise.push(theta_noise(&config.variance, dv, dw, path.v[i], stream));
    }
    joint_euler_from_increments(config.theta0, config.psi / config.theta0, &path.step_variance, &noise)
}

/// The joint scheme driven by given increments `ΔV_i` and `∫√v dB` over each step.
pub fn joint_euler_from_increments(
    theta0: f64,
    phi0: f64,
    step_variance: &[f64],
    noise: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if step_variance.len() != noise.len() {
        return Err(Error::Input("increment arrays differ in length".into()));
    }
    let mut theta = Vec::with_capacity(noise.len() + 1);
    let mut phi = Vec::with_capacity(noise.len() + 1);
    let (mut th, mut ph) = (theta0, phi0);
    theta.push(th);
    phi.push(ph);
    for (i, (&dv, &dn)) in step_variance.iter().zip(noise).enumerate() {
        let p = th * ph;
        let p2 = p * p;
        let th_next = th + (p2 - 16.0) / 16.0 * dv - p * dn;
        let ph_next = ph + (16.0 + 16.0 * ph * ph * th - p2) * ph / (16.0 * th) * dv + ph * ph * dn;
        if !(th_next > 0.0) {
            return Err(Error::SignLoss { step: i + 1, what: "theta" });
        }
        if !(ph_next > 0.0) {
            return Err(Error::SignLoss { step: i + 1, what: "phi" });
        }
        th = th_next;
        ph = ph_next;
        theta.push(th);
        phi.push(ph);
    }
    Ok((theta, phi))
}

/// Stock path `S_{i+1} = S_i exp(√ΔV_i Z − ΔV_i/2)` from `s0`.
pub fn simulate_stock(path: &VariancePath, s0: f64, stream: &mut RngStream) -> Vec<f64> {
    let mut s = Vec::with_capacity(path.step_variance.len() + 1);
    let mut x = s0;
    s.push(x);
    for &dv in &path.step_variance {
        x = stock_step(x, dv, gaussian(stream));
        s.push(x);
    }
    s
}

/// `log(K/S_i)` along a stock path.
pub fn log_moneyness(s: &[f64], strike: f64) -> Vec<f64> {
    s.iter().map(|&x| (strike / x).ln()).collect()
}

/// θ in closed form under Heston with `B^θ = ±B^v`:
///
/// ```text
/// +1: θ0 + (ψ²/16 − 1 − κψ/ξ) V_t − (ψ/ξ)(v_t − v0) + κv̄ψt/ξ
/// −1: θ0 + (ψ²/16 − 1 + κψ/ξ) V_t + (ψ/ξ)(v_t − v0) − κv̄ψt/ξ
/// ```
pub fn heston_theta_closed_form(t: f64, v_t: f64, big_v_t: f64, config: &SimConfig) -> Result<f64> {
    let VarianceModel::Heston {
        v0,
        kappa,
        vbar,
        xi,
        theta_corr,
    } = config.variance
    else {
        return Err(Error::Config("closed-form theta requires the heston variance model".into()));
    };
    let psi = config.psi;
    let c = theta_corr;
    Ok(config.theta0 + (psi * psi / 16.0 - 1.0 - c * kappa * psi / xi) * big_v_t - c * psi / xi * (v_t - v0)
        + c * kappa * vbar * psi * t / xi)
}

/// A full simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub integrated_variance: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub s: Vec<f64>,
    /// First index with `θ < barrier`.
    pub crossed_at: Option<usize>,
}

impl PathBundle {
    pub fn log_moneyness(&self, strike: f64) -> Vec<f64> {
        log_moneyness(&self.s, strike)
    }
}

/// Path `index` of `config`, with crossings of `barrier` flagged.
pub fn simulate_path(config: &SimConfig, index: u64, barrier: f64) -> Result<PathBundle> {
    let mut streams = PathStreams::new(config.seed, index);
    let vp = variance_path(
        &config.variance,
        config.maturity,
        config.steps,
        streams.variance_stream(&config.variance),
    )?;
    let theta = simulate_theta_reduced(config, &vp, &mut streams.theta);
    let s = simulate_stock(&vp, config.s0, &mut streams.stock);
    let phi = phi_from_theta(&theta, config.psi);
    let crossed_at = crate::bubble::detect_stop(&theta, barrier);
    Ok(PathBundle {
        t: vp.t,
        v: vp.v,
        integrated_variance: vp.integrated,
        theta,
        phi,
        s,
        crossed_at,
    })
}

/// All `config.paths` paths, generated in parallel and returned in index order.
pub fn simulate_paths(config: &SimConfig, barrier: f64) -> Result<Vec<PathBundle>> {
    config.validate()?;
    (0..config.paths as u64)
        .into_par_iter()
        .map(|i| simulate_path(config, i, barrier))
        .collect()
}

/// State of one path at a grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathState {
    pub step: usize,
    pub t: f64,
    pub v: f64,
    pub theta: f64,
    pub s: f64,
}

/// Generates a path one step at a time, so callers can stop early.
///
/// Produces the same numbers as [`simulate_path`] for the same config and index.
#[derive(Debug, Clone)]
pub struct PathStepper {
    config: SimConfig,
    streams: PathStreams,
    variance: VarianceStepper,
    drift: f64,
    state: PathState,
}

impl PathStepper {
    pub fn new(config: &SimConfig, index: u64) -> Self {
        let mut streams = PathStreams::new(config.seed, index);
        let variance = VarianceStepper::new(
            config.variance,
            config.maturity,
            config.steps,
            streams.variance_stream(&config.variance),
        );
        let state = PathState {
            step: 0,
            t: 0.0,
            v: variance.current(0),
            theta: config.theta0,
            s: config.s0,
        };
        Self {
            config: *config,
            streams,
            variance,
            drift: config.theta_drift(),
            state,
        }
    }

    pub fn state(&self) -> PathState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    /// Advances one step; `None` once maturity is reached.
    pub fn step(&mut self) -> Option<PathState> {
        if self.is_done() {
            return None;
        }
        let i = self.state.step;
        let model = self.config.variance;
        let (dv, dw) = self.variance.advance(i, self.streams.variance_stream(&model));
        let noise = theta_noise(&model, dv, dw, self.state.v, &mut self.streams.theta);
        let theta = theta_step(self.state.theta, self.drift, self.config.psi, dv, noise);
        let s = stock_step(self.state.s, dv, gaussian(&mut self.streams.stock));
        self.state = PathState {
            step: i + 1,
            t: grid_time(self.config.maturity, self.config.steps, i + 1),
            v: self.variance.current(i + 1),
            theta,
            s,
        };
        Some(self.state)
    }
}

/// Error of a scheme at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefinementLevel {
    pub dt: f64,
    pub steps: usize,
    pub error: f64,
}

/// Least-squares slope of `log error` against `log dt`.
pub fn fitted_order(levels: &[RefinementLevel]) -> f64 {
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .filter(|l| l.error > 0.0)
        .map(|l| (l.dt.ln(), l.error.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Step counts for `dts` on `[0, maturity]`, with a fine grid that every level divides.
fn nested_steps(maturity: f64, dts: &[f64], fine_factor: usize) -> Result<(Vec<usize>, usize)> {
    if dts.is_empty() {
        return Err(Error::Input("empty dt list".into()));
    }
    let mut steps = Vec::with_capacity(dts.len());
    for &dt in dts {
        if !(dt > 0.0) {
            return Err(Error::Input(format!("dt must be > 0, got {dt}")));
        }
        let n = (maturity / dt).round();
        if n < 1.0 || ((n * dt - maturity) / maturity).abs() > 1e-9 {
            return Err(Error::Input(format!("dt = {dt} does not divide the horizon {maturity}")));
        }
        steps.push(n as usize);
    }
    let fine = steps.iter().copied().max().unwrap_or(1) * fine_factor;
    if let Some(n) = steps.iter().find(|&&n| fine % n != 0) {
        return Err(Error::Input(format!(
            "grids are not nested: {n} steps does not divide {fine}"
        )));
    }
    Ok((steps, fine))
}

fn aggregate(fine: &[f64], factor: usize) -> Vec<f64> {
    fine.chunks(factor).map(|c| c.iter().sum()).collect()
}

/// Refinement study of `sup_t |θφ − ψ|` for [`joint_euler_from_increments`].
///
/// Each path is simulated on the finest grid; coarser levels sum its increments.
/// Returns, per path, the sup error at every level, or `None` if any level lost
/// the sign of `θ` or `φ`.
pub fn psi_conservation_study(config: &SimConfig, dts: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    config.validate()?;
    let (steps, fine) = nested_steps(config.maturity, dts, 1)?;
    let fine_config = SimConfig { steps: fine, ..*config };
    let phi0 = config.psi / config.theta0;
    Ok((0..config.paths as u64)
        .into_par_iter()
        .map(|index| -> Result<Option<Vec<f64>>> {
            let mut streams = PathStreams::new(config.seed, index);
            let vp = variance_path(
                &config.variance,
                config.maturity,
                fine,
                streams.variance_stream(&config.variance),
            )?;
            let mut noise = Vec::with_capacity(fine);
            for (i, &dv) in vp.step_variance.iter().enumerate() {
                let dw = vp.driver.get(i).copied().unwrap_or(0.0);
                noise.push(theta_noise(&fine_config.variance, dv, dw, vp.v[i], &mut streams.theta));
            }
            let mut errors = Vec::with_capacity(steps.len());
            for &n in &steps {
                let factor = fine / n;
                let dv = aggregate(&vp.step_variance, factor);
                let dn = aggregate(&noise, factor);
                match joint_euler_from_increments(config.theta0, phi0, &dv, &dn) {
                    Ok((th, ph)) => errors.push(
                        th.iter()
                            .zip(&ph)
                            .map(|(a, b)| (a * b - config.psi).abs())
                            .fold(0.0, f64::max),
                    ),
                    Err(Error::SignLoss { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            Ok(Some(errors))
        })
        .collect::<Result<Vec<_>>>()?)
}

/// One level of [`heston_refinement_study`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HestonLevel {
    pub level: RefinementLevel,
    /// Mean over paths of `|θ_closed(t_i) − θ_euler(t_i)|` at every coarse grid time, from `t = 0`.
    pub profile: Vec<f64>,
}

/// Pathwise comparison of Euler θ against the Heston closed form.
///
/// Every path is generated on a grid `fine_factor` times finer than the
/// smallest `dt`; the closed form is evaluated along that fine path (trapezoid
/// `V`) and serves as the reference. Each coarse level runs full-truncation
/// Euler for `v` and the reduced θ scheme on summed `B^v` increments. The
/// level error is the mean over paths of `max_i |θ_closed(t_i) − θ_euler(t_i)|`.
pub fn heston_refinement_study(config: &SimConfig, dts: &[f64], fine_factor: usize) -> Result<Vec<HestonLevel>> {
    config.validate()?;
    let VarianceModel::Heston { kappa, vbar, xi, theta_corr, v0 } = config.variance else {
        return Err(Error::Config("heston refinement study requires the heston variance model".into()));
    };
    let (steps, fine) = nested_steps(config.maturity, dts, fine_factor.max(1))?;
    let drift = config.theta_drift();
    // per path, per level: (max error, error at each coarse time)
    let per_path: Vec<Vec<(f64, Vec<f64>)>> = (0..config.paths as u64)
        .into_par_iter()
        .map(|index| -> Result<Vec<(f64, Vec<f64>)>> {
            let mut streams = PathStreams::new(config.seed, index);
            let vp = variance_path(&config.variance, config.maturity, fine, &mut streams.theta)?;
            let mut out = Vec::with_capacity(steps.len());
            for &n in &steps {
                let factor = fine / n;
                let dt = config.maturity / n as f64;
                let dws = aggregate(&vp.driver, factor);
                let (mut v, mut th) = (v0, config.theta0);
                let mut errs = Vec::with_capacity(n + 1);
                errs.push((heston_theta_closed_form(0.0, vp.v[0], vp.integrated[0], config)? - th).abs());
                for (j, dw) in dws.iter().enumerate() {
                    let vp_ = v.max(0.0);
                    th = theta_step(th, drift, config.psi, vp_ * dt, theta_corr * vp_.sqrt() * dw);
                    v += kappa * (vbar - vp_) * dt + xi * vp_.sqrt() * dw;
                    let f = (j + 1) * factor;
                    let closed = heston_theta_closed_form(vp.t[f], vp.v[f], vp.integrated[f], config)?;
                    errs.push((closed - th).abs());
                }
                out.push((errs.iter().copied().fold(0.0, f64::max), errs));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = per_path.len() as f64;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(l, &n)| {
            let mut profile = vec![0.0; n + 1];
            for p in &per_path {
                for (acc, e) in profile.iter_mut().zip(&p[l].1) {
                    *acc += e;
                }
            }
            profile.iter_mut().for_each(|x| *x /= m);
            HestonLevel {
                level: RefinementLevel {
                    dt: config.maturity / n as f64,
                    steps: n,
                    error: per_path.iter().map(|p| p[l].0).sum::<f64>() / m,
                },
                profile,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v0: f64, maturity: f64, steps: usize) -> SimConfig {
        SimConfig {
            maturity,
            theta0: 0.5,
            psi: 0.5,
            s0: 1.0,
            variance: VarianceModel::Constant { v0 },
            steps,
            paths: 1,
            seed: 7,
        }
    }

    fn heston(corr: f64) -> SimConfig {
        SimConfig {
            variance: VarianceModel::Heston {
                v0: 0.04,
                kappa: 1.5,
                vbar: 0.04,
                xi: 0.3,
                theta_corr: corr,
            },
            ..constant(0.0, 1.0, 100)
        }
    }

    fn switch() -> VarianceModel {
        VarianceModel::BinarySwitch {
            v0: 0.2,
            eps1: 0.3,
            eps2: 0.6,
        }
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let json = r#"{"maturity":1,"theta0":0.5,"psi":0.5,"variance":{"model":"constant","v0":0.25},"steps":500,"paths":5,"seed":42}"#;
        let c: SimConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.s0, 1.0);
        assert_eq!(c.variance, VarianceModel::Constant { v0: 0.25 });
        c.validate().unwrap();
        let back: SimConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let h = r#"{"model":"heston","v0":0.04,"kappa":1.5,"vbar":0.04,"xi":0.3,"theta_corr":-1}"#;
        assert!(matches!(serde_json::from_str::<VarianceModel>(h).unwrap(), VarianceModel::Heston { theta_corr, .. } if theta_corr == -1.0));
        let b = r#"{"model":"binary_switch","v0":0.2,"eps1":0.3,"eps2":0.6}"#;
        assert_eq!(serde_json::from_str::<VarianceModel>(b).unwrap(), switch());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let json = r#"{"maturity":1,"theta0":0.5,"psi":0.5,"variance":{"model":"constant","v0":0.25},"steps":5,"paths":5,"seed":1,"sead":2}"#;
        assert!(serde_json::from_str::<SimConfig>(json).is_err());
        let model = r#"{"model":"constant","v0":0.25,"kappa":1}"#;
        assert!(serde_json::from_str::<VarianceModel>(model).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = constant(0.25, 1.0, 10);
        ok.validate().unwrap();
        assert!((ok.barrier() - 0.013).abs() < 1e-3);
        for bad in [
            SimConfig { psi: 4.0, ..ok },
            SimConfig { psi: 0.0, ..ok },
            SimConfig { theta0: 0.01, ..ok },
            SimConfig { maturity: 0.0, ..ok },
            SimConfig { steps: 0, ..ok },
            SimConfig { paths: 0, ..ok },
            SimConfig { s0: -1.0, ..ok },
            SimConfig { variance: VarianceModel::Constant { v0: -0.1 }, ..ok },
            SimConfig { variance: switch(), maturity: 2.0, ..ok },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
        let mut h = heston(1.0);
        h.validate().unwrap();
        assert_eq!(h.variance.feller(), Some(true));
        if let VarianceModel::Heston { ref mut theta_corr, .. } = h.variance {
            *theta_corr = 0.5;
        }
        assert!(h.validate().is_err());
    }

    #[test]
    fn constant_variance_path() {
        let mut st = RngStream::new(1, 0);
        let vp = variance_path(&VarianceModel::Constant { v0: 0.25 }, 1.0, 500, &mut st).unwrap();
        assert!(vp.v.iter().all(|&v| v == 0.25));
        assert_eq!(*vp.integrated.last().unwrap(), 0.25);
        assert_eq!(vp.t.len(), 501);
        assert_eq!(*vp.t.last().unwrap(), 1.0);
    }

    #[test]
    fn switch_integrates_to_v0() {
        for path in 0..200 {
            let mut st = RngStream::new(3, path);
            for steps in [1, 2, 3, 7, 500] {
                let vp = variance_path(&switch(), 1.0, steps, &mut st.clone()).unwrap();
                assert_eq!(*vp.integrated.last().unwrap(), 0.2);
                let total: f64 = vp.step_variance.iter().sum();
                assert!((total - 0.2).abs() < 1e-15);
            }
            let vp = variance_path(&switch(), 1.0, 300, &mut st).unwrap();
            let up = vp.v[150] > 0.2;
            let (mid, last) = if up { (0.26, 0.14) } else { (0.08, 0.32) };
            assert!((vp.v[150] - mid).abs() < 1e-15 && (vp.v[250] - last).abs() < 1e-15);
            assert_eq!(vp.v[0], 0.2);
        }
        let mut st = RngStream::new(3, 0);
        assert!(variance_path(&switch(), 0.5, 10, &mut st).is_err());
    }

    #[test]
    fn heston_mean_matches_cir() {
        let model = heston(1.0).variance;
        let n = 100_000;
        let vals: Vec<f64> = (0..n as u64)
            .into_par_iter()
            .map(|p| {
                let vp = variance_path(&model, 1.0, 200, &mut RngStream::with_channel(5, p, THETA_CHANNEL)).unwrap();
                assert!(vp.v.iter().all(|&v| v >= 0.0));
                *vp.v.last().unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let want = 0.04 + (0.04 - 0.04) * (-1.5f64).exp();
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} (se {se})");

        let off = VarianceModel::Heston { v0: 0.09, kappa: 1.5, vbar: 0.04, xi: 0.3, theta_corr: 1.0 };
        let vals: Vec<f64> = (0..n as u64)
            .into_par_iter()
            .map(|p| *variance_path(&off, 1.0, 200, &mut RngStream::with_channel(6, p, THETA_CHANNEL)).unwrap().v.last().unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let want = 0.04 + 0.05 * (-1.5f64).exp();
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} (se {se})");
    }

    #[test]
    fn theta_drift_vanishes_at_psi_four() {
        let c = SimConfig { psi: 4.0, ..constant(0.25, 1.0, 10) };
        assert_eq!(c.theta_drift(), 0.0);
        let vp = variance_path(&c.variance, 1.0, 10, &mut RngStream::new(1, 0)).unwrap();
        let mut a = RngStream::new(9, 0);
        let mut b = a.clone();
        let th = simulate_theta_reduced(&c, &vp, &mut a);
        let mut x = 0.5;
        for i in 0..10 {
            x -= 4.0 * (0.025f64).sqrt() * gaussian(&mut b);
            assert_eq!(th[i + 1], x);
        }
    }

    #[test]
    fn theta_terminal_mean() {
        let c = constant(0.25, 1.0, 50);
        let n = 100_000;
        let vals: Vec<f64> = (0..n as u64)
            .into_par_iter()
            .map(|p| {
                let mut s = PathStreams::new(11, p);
                let vp = variance_path(&c.variance, 1.0, 50, &mut s.aux).unwrap();
                *simulate_theta_reduced(&c, &vp, &mut s.theta).last().unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let want = 0.5 - 0.24609375;
        assert!((mean - want).abs() < 3.0 * (var / n as f64).sqrt());
        // Var θ_T = ψ²v0T exactly
        assert!((var - 0.0625).abs() < 4.0 * 0.0625 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn theta_is_deterministic_and_phi_consistent() {
        let c = constant(0.25, 1.0, 500);
        let a = simulate_path(&c, 3, c.barrier()).unwrap();
        let b = simulate_path(&c, 3, c.barrier()).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.s, b.s);
        assert_eq!(a.crossed_at, b.crossed_at);
        for (t, p) in a.theta.iter().zip(&a.phi) {
            if *t > 0.0 {
                assert!((t * p - 0.5).abs() <= 1e-15);
            } else {
                assert!(p.is_nan());
            }
        }
        assert_ne!(simulate_path(&c, 4, c.barrier()).unwrap().theta, a.theta);
    }

    #[test]
    fn joint_euler_frozen_without_variance() {
        let c = constant(0.0, 1.0, 1);
        let vp = variance_path(&c.variance, 1.0, 1, &mut RngStream::new(0, 0)).unwrap();
        let (th, ph) = simulate_joint_euler(&c, &vp, &mut RngStream::new(0, 1)).unwrap();
        assert_eq!(th, vec![0.5, 0.5]);
        assert_eq!(ph, vec![1.0, 1.0]);
        assert_eq!(th[1] * ph[1], 0.5);
    }

    #[test]
    fn joint_euler_keeps_psi_close() {
        let c = constant(0.25, 0.5, 5000);
        let vp = variance_path(&c.variance, 0.5, 5000, &mut RngStream::new(0, 0)).unwrap();
        let (th, ph) = simulate_joint_euler(&c, &vp, &mut RngStream::with_channel(42, 0, THETA_CHANNEL)).unwrap();
        let err = th.iter().zip(&ph).map(|(a, b)| (a * b - 0.5).abs()).fold(0.0, f64::max);
        assert!(err < 5e-3, "{err}");
    }

    #[test]
    fn joint_euler_reports_sign_loss() {
        let err = joint_euler_from_increments(0.5, 1.0, &[0.25, 0.25], &[0.1, 2.0]).unwrap_err();
        assert_eq!(err, Error::SignLoss { step: 2, what: "theta" });
        assert!(joint_euler_from_increments(0.5, 1.0, &[0.1], &[0.1, 0.1]).is_err());
    }

    #[test]
    fn stock_frozen_without_variance() {
        let vp = variance_path(&VarianceModel::Constant { v0: 0.0 }, 1.0, 20, &mut RngStream::new(0, 0)).unwrap();
        let s = simulate_stock(&vp, 1.7, &mut RngStream::new(0, 1));
        assert!(s.iter().all(|&x| x == 1.7));
    }

    #[test]
    fn stock_is_a_martingale_and_prices_the_call() {
        let c = constant(0.25, 1.0, 20);
        let n = 100_000;
        let terminal: Vec<f64> = (0..n as u64)
            .into_par_iter()
            .map(|p| *simulate_path(&c, p, c.barrier()).unwrap().s.last().unwrap())
            .collect();
        let stats = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0);
            (m, (v / xs.len() as f64).sqrt())
        };
        let (m, se) = stats(&terminal);
        assert!((m - 1.0).abs() < 3.0 * se, "{m} {se}");
        let payoff: Vec<f64> = terminal.iter().map(|s| (s - 1.0).max(0.0)).collect();
        let (m, se) = stats(&payoff);
        let bs = crate::blackscholes::bs_normalized(0.0, 0.5).unwrap();
        assert!((m - bs).abs() < 3.0 * se, "{m} vs {bs} ({se})");
    }

    #[test]
    fn heston_closed_form_limits() {
        for corr in [1.0, -1.0] {
            let c = heston(corr);
            assert_eq!(heston_theta_closed_form(0.0, 0.04, 0.0, &c).unwrap(), 0.5);
            let tiny = SimConfig { psi: 1e-12, ..c };
            let th = heston_theta_closed_form(0.7, 0.05, 0.03, &tiny).unwrap();
            assert!((th - (0.5 - 0.03)).abs() < 1e-10);
        }
        assert!(heston_theta_closed_form(0.0, 0.0, 0.0, &constant(0.25, 1.0, 10)).is_err());
    }

    #[test]
    fn heston_closed_form_matches_euler_on_same_path() {
        // On a shared path Euler θ equals the closed form with left-point V,
        // so the gap is the V quadrature difference only.
        for corr in [1.0, -1.0] {
            let c = SimConfig { steps: 1000, ..heston(corr) };
            let mut st = PathStreams::new(2, 0);
            let vp = variance_path(&c.variance, 1.0, 1000, &mut st.theta).unwrap();
            let th = simulate_theta_reduced(&c, &vp, &mut st.aux);
            let closed = heston_theta_closed_form(1.0, vp.v[1000], vp.integrated[1000], &c).unwrap();
            assert!((closed - th[1000]).abs() < 2e-3, "{closed} vs {}", th[1000]);
        }
    }

    #[test]
    fn flat_smile_when_psi_vanishes() {
        let vp = variance_path(&VarianceModel::Constant { v0: 0.3 }, 1.0, 10, &mut RngStream::new(0, 0)).unwrap();
        let total = *vp.integrated.last().unwrap();
        for &big_v in &vp.integrated[..10] {
            let theta = total - big_v;
            for k in [-2.0, -0.3, 0.0, 1.1] {
                assert_eq!(crate::ssvi::symmetric_total_variance(k, theta, 0.0), theta);
            }
        }
    }

    #[test]
    fn stepper_matches_arrays() {
        let models = [
            VarianceModel::Constant { v0: 0.25 },
            heston(1.0).variance,
            heston(-1.0).variance,
            switch(),
        ];
        for model in models {
            let c = SimConfig { variance: model, steps: 97, ..constant(0.25, 1.0, 97) };
            for index in 0..5 {
                let bundle = simulate_path(&c, index, c.barrier()).unwrap();
                let mut st = PathStepper::new(&c, index);
                assert_eq!(st.state().theta, bundle.theta[0]);
                while let Some(s) = st.step() {
                    assert_eq!(s.theta.to_bits(), bundle.theta[s.step].to_bits());
                    assert_eq!(s.s.to_bits(), bundle.s[s.step].to_bits());
                    assert_eq!(s.v.to_bits(), bundle.v[s.step].to_bits());
                    assert_eq!(s.t, bundle.t[s.step]);
                }
                assert!(st.is_done() && st.step().is_none());
            }
        }
    }

    #[test]
    fn streams_are_independent_channels() {
        let mut s = PathStreams::new(1, 0);
        let a = gaussian(&mut s.stock);
        let b = gaussian(&mut s.theta);
        let c = gaussian(&mut s.aux);
        assert!(a != b && b != c && a != c);
    }

    #[test]
    fn nested_grid_checks() {
        assert!(nested_steps(1.0, &[0.3], 1).is_err());
        assert!(nested_steps(1.0, &[], 1).is_err());
        assert!(nested_steps(1.0, &[0.5, 1.0 / 3.0], 1).is_err());
        assert_eq!(nested_steps(1.0, &[1e-2, 2.5e-3], 16).unwrap(), (vec![100, 400], 6400));
    }

    #[test]
    fn order_fit() {
        let levels: Vec<RefinementLevel> = [1.0, 0.25, 0.0625]
            .iter()
            .map(|&dt: &f64| RefinementLevel { dt, steps: 1, error: 3.0 * dt.sqrt() })
            .collect();
        assert!((fitted_order(&levels) - 0.5).abs() < 1e-12);
    }
}
