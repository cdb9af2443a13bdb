//! Command-line front end for the `ssvi-bubble` library.
//!
//! Every subcommand writes its primary output (CSV or a report) to `--out`, or
//! to stdout when absent, and echoes the fully resolved run configuration to a
//! sidecar JSON: `<out>.run.json` next to the output, or stderr otherwise.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use ssvi_bubble::bubble::{bs_bubble_rhs, inner_k1_closed_form, inner_k1_quadrature, master_equation_mc, stopped_option_value};
use ssvi_bubble::dynamics::{fitted_order, heston_refinement_study, simulate_paths, RefinementLevel, SimConfig};
use ssvi_bubble::ssvi::{
    butterfly_density_scan, butterfly_exact_symmetric, butterfly_sufficient, ssvi_total_variance, sufficient_bound,
    ArbitrageReport, SsviSlice,
};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "SSVI_BUBBLE_THREADS";

/// Largest |z| accepted by `bubble-verify`.
pub const Z_LIMIT: f64 = 3.0;

/// Smallest error ratio between consecutive `heston-compare` levels.
pub const MIN_REFINEMENT_RATIO: f64 = 1.8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("static arbitrage detected")]
    Arbitrage,
    #[error("{0}")]
    Tolerance(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Arbitrage => 3,
            CliError::Tolerance(_) => 4,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<ssvi_bubble::Error> for CliError {
    fn from(e: ssvi_bubble::Error) -> Self {
        use ssvi_bubble::Error as E;
        match e {
            E::NonConvergence { .. } | E::SignLoss { .. } => CliError::Tolerance(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ssvi-bubble", version, about = "Symmetric SSVI dynamics, arbitrage checks and bubble experiments")]
pub struct Cli {
    /// Worker threads for Monte-Carlo runs (results do not depend on it).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate an SSVI slice.
    Smile(SmileArgs),
    /// Static-arbitrage report for one SSVI slice.
    Check(CheckArgs),
    /// Simulate stock, variance and SSVI-level paths.
    Simulate(SimulateArgs),
    /// Monte-Carlo check of the stopped pricing identity.
    BubbleVerify(BubbleVerifyArgs),
    /// Infinite-horizon Bessel identity and its inner integral.
    BesselCheck(BesselCheckArgs),
    /// Heston closed-form theta against Euler under refinement.
    HestonCompare(HestonCompareArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SmileArgs {
    #[arg(long)]
    pub theta: f64,
    #[arg(long)]
    pub phi: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub rho: f64,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub k_min: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub k_max: f64,
    #[arg(long, default_value_t = 201)]
    pub points: usize,
    /// Maturity used to turn total variance into implied volatility.
    #[arg(long, default_value_t = 1.0)]
    pub maturity: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CheckArgs {
    #[arg(long)]
    pub theta: f64,
    #[arg(long)]
    pub phi: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub rho: f64,
    /// Range and step of the density scan.
    #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
    pub k_min: f64,
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub k_max: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub k_step: f64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Also write `path_id,step,k,total_variance` smiles for the states before the crossing.
    #[arg(long)]
    #[serde(skip)]
    pub smiles: Option<PathBuf>,
    /// Emit smiles every this many steps.
    #[arg(long, default_value_t = 50)]
    pub smile_every: usize,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub smile_k_min: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub smile_k_max: f64,
    #[arg(long, default_value_t = 41)]
    pub smile_points: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BubbleVerifyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: PathBuf,
    /// Comma-separated strikes.
    #[arg(long, value_delimiter = ',', default_value = "0.8,1.0,1.2")]
    pub strikes: Vec<f64>,
    /// Overrides the number of paths in the config.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Stopping level in (0, theta0) instead of B^-1(psi^2).
    #[arg(long)]
    pub barrier_override: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BesselCheckArgs {
    #[arg(long)]
    pub psi: f64,
    #[arg(long)]
    pub theta0: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub k: f64,
    /// Comma-separated stopping levels in (0, theta0).
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    pub beta_levels: Vec<f64>,
    /// Tolerance on |RHS − LHS| and on pairwise RHS differences.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Relative tolerance of the inner-integral identity.
    #[arg(long, default_value_t = 1e-8)]
    pub inner_tol: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HestonCompareArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: PathBuf,
    /// Comma-separated time steps, each dividing the maturity.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.0025,0.000625")]
    pub dt_list: Vec<f64>,
    /// Reference grid is this many times finer than the smallest dt.
    #[arg(long, default_value_t = 16)]
    pub fine_factor: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Also write `dt,t,mean_abs_error` per grid time.
    #[arg(long)]
    #[serde(skip)]
    pub profile: Option<PathBuf>,
}

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Where a run writes its primary output.
struct Output {
    path: Option<PathBuf>,
}

impl Output {
    fn new(path: Option<PathBuf>) -> Self {
        Self { path }
    }

    fn write(&self, contents: &str) -> CliResult<()> {
        match &self.path {
            Some(p) => write_file(p, contents),
            None => {
                let mut out = io::stdout().lock();
                out.write_all(contents.as_bytes())
                    .and_then(|_| out.flush())
                    .map_err(|source| CliError::Io {
                        path: "<stdout>".into(),
                        source,
                    })
            }
        }
    }

    fn sidecar(&self, value: &serde_json::Value) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).expect("json value serialises") + "\n";
        match &self.path {
            Some(p) => write_file(&sidecar_path(p), &text),
            None => {
                eprint!("{text}");
                Ok(())
            }
        }
    }
}

/// `<out>.run.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".run.json");
    PathBuf::from(name)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads and validates a simulation config.
pub fn load_config(path: &Path) -> CliResult<SimConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    let config: SimConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("bad config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        // fails only if a pool already exists, which keeps its own size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Smile(a) => smile(&a),
        Command::Check(a) => check(&a),
        Command::Simulate(a) => simulate(&a),
        Command::BubbleVerify(a) => bubble_verify(&a),
        Command::BesselCheck(a) => bessel_check(&a),
        Command::HestonCompare(a) => heston_compare(&a),
    }
}

/// A slice with `φ ≥ 0`, so that `φ = 0` gives the flat smile.
fn slice_from_flags(theta: f64, phi: f64, rho: f64) -> CliResult<SsviSlice> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(CliError::Invalid(format!("theta must be > 0, got {theta}")));
    }
    if !(phi >= 0.0) || !phi.is_finite() {
        return Err(CliError::Invalid(format!("phi must be >= 0, got {phi}")));
    }
    if !(rho.abs() < 1.0) {
        return Err(CliError::Invalid(format!("rho must lie in (-1, 1), got {rho}")));
    }
    Ok(SsviSlice { theta, rho, phi })
}

/// `i`-th of `n + 1` equispaced points; exactly antisymmetric when `lo = −hi`.
fn grid_point(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    (lo * (n - i) as f64 + hi * i as f64) / n as f64
}

pub fn smile(a: &SmileArgs) -> CliResult<()> {
    let slice = slice_from_flags(a.theta, a.phi, a.rho)?;
    if a.points < 2 || !(a.k_max > a.k_min) {
        return Err(CliError::Invalid("need k_min < k_max and at least 2 points".into()));
    }
    if !(a.maturity > 0.0) {
        return Err(CliError::Invalid(format!("maturity must be > 0, got {}", a.maturity)));
    }
    let mut csv = String::from("k,total_variance,implied_vol\n");
    let n = a.points - 1;
    for i in 0..=n {
        let k = grid_point(a.k_min, a.k_max, i, n);
        let w = ssvi_total_variance(k, &slice);
        csv.push_str(&format!("{},{},{}\n", fmt_float(k), fmt_float(w), fmt_float((w / a.maturity).sqrt())));
    }
    let out = Output::new(a.out.clone());
    out.write(&csv)?;
    out.sidecar(&json!({"command": "smile", "args": a}))
}

#[derive(Debug, Serialize)]
pub struct CheckReport {
    pub theta: f64,
    pub phi: f64,
    pub rho: f64,
    pub psi: f64,
    pub arbitrage_free: bool,
    pub margin: f64,
    pub reports: Vec<ArbitrageReport>,
}

/// Builds the check report; the verdict is the exact one for `ρ = 0` and the
/// density scan otherwise (the sufficient condition alone cannot prove arbitrage).
pub fn check_report(a: &CheckArgs) -> CliResult<CheckReport> {
    let slice = slice_from_flags(a.theta, a.phi, a.rho)?;
    let psi = slice.psi();
    let mut reports = Vec::new();
    let (ok, margin);
    if a.rho == 0.0 {
        let exact = butterfly_exact_symmetric(a.theta, psi);
        ok = exact.butterfly_ok;
        margin = exact.boundary_value - exact.psi_squared;
        reports.push(exact);
    } else {
        let bound = sufficient_bound(&slice);
        reports.push(ArbitrageReport {
            butterfly_ok: butterfly_sufficient(&slice),
            boundary_value: bound,
            psi_squared: psi * psi,
            density_min: None,
            density_argmin: None,
            method: ssvi_bubble::ssvi::CheckMethod::Sufficient,
        });
        let scan = if a.phi > 0.0 {
            butterfly_density_scan(&slice, a.k_min, a.k_max, a.k_step)?
        } else {
            // flat smile: g ≡ 1
            ArbitrageReport {
                butterfly_ok: true,
                boundary_value: bound,
                psi_squared: 0.0,
                density_min: Some(1.0),
                density_argmin: Some(a.k_min),
                method: ssvi_bubble::ssvi::CheckMethod::DensityScan,
            }
        };
        ok = scan.butterfly_ok;
        margin = scan.density_min.unwrap_or(f64::NAN);
        reports.push(scan);
    }
    Ok(CheckReport {
        theta: a.theta,
        phi: a.phi,
        rho: a.rho,
        psi,
        arbitrage_free: ok,
        margin,
        reports,
    })
}

pub fn check(a: &CheckArgs) -> CliResult<()> {
    let report = check_report(a)?;
    for r in &report.reports {
        let verdict = if r.butterfly_ok { "ok" } else { "VIOLATION" };
        match r.method {
            ssvi_bubble::ssvi::CheckMethod::Exact => eprintln!(
                "exact: {verdict}  B(theta) = {:.6e}  psi^2 = {:.6e}  margin = {:.6e}",
                r.boundary_value,
                r.psi_squared,
                r.boundary_value - r.psi_squared
            ),
            ssvi_bubble::ssvi::CheckMethod::Sufficient => eprintln!(
                "sufficient: {verdict}  theta*phi = {:.6e}  bound = {:.6e}",
                report.psi, r.boundary_value
            ),
            ssvi_bubble::ssvi::CheckMethod::DensityScan => eprintln!(
                "density scan: {verdict}  min g = {:.6e} at k = {:.4}",
                r.density_min.unwrap_or(f64::NAN),
                r.density_argmin.unwrap_or(f64::NAN)
            ),
        }
    }
    let out = Output::new(a.out.clone());
    out.write(&(serde_json::to_string_pretty(&report).expect("report serialises") + "\n"))?;
    out.sidecar(&json!({"command": "check", "args": a}))?;
    if report.arbitrage_free {
        Ok(())
    } else {
        Err(CliError::Arbitrage)
    }
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let config = load_config(&a.config)?;
    let barrier = config.barrier();
    let paths = simulate_paths(&config, barrier)?;

    let mut csv = String::from("path_id,step,t,v,theta,phi,S,crossed\n");
    for (id, p) in paths.iter().enumerate() {
        for i in 0..p.t.len() {
            let crossed = p.crossed_at.is_some_and(|c| i >= c) as u8;
            csv.push_str(&format!(
                "{id},{i},{},{},{},{},{},{crossed}\n",
                fmt_float(p.t[i]),
                fmt_float(p.v[i]),
                fmt_float(p.theta[i]),
                fmt_float(p.phi[i]),
                fmt_float(p.s[i]),
            ));
        }
    }
    Output::new(a.out.clone()).write(&csv)?;

    if let Some(smiles) = &a.smiles {
        if a.smile_points < 2 || !(a.smile_k_max > a.smile_k_min) || a.smile_every == 0 {
            return Err(CliError::Invalid("bad smile grid".into()));
        }
        let n = a.smile_points - 1;
        let mut csv = String::from("path_id,step,k,total_variance\n");
        for (id, p) in paths.iter().enumerate() {
            let end = p.crossed_at.unwrap_or(p.t.len());
            for i in (0..end).step_by(a.smile_every) {
                for j in 0..=n {
                    let k = grid_point(a.smile_k_min, a.smile_k_max, j, n);
                    let w = ssvi_bubble::ssvi::symmetric_total_variance(k, p.theta[i], config.psi);
                    csv.push_str(&format!("{id},{i},{},{}\n", fmt_float(k), fmt_float(w)));
                }
            }
        }
        write_file(smiles, &csv)?;
    }

    let crossed: Vec<Option<usize>> = paths.iter().map(|p| p.crossed_at).collect();
    Output::new(a.out.clone()).sidecar(&json!({
        "command": "simulate",
        "config": config,
        "barrier": barrier,
        "crossed_at": crossed,
        "smiles": a.smiles.as_ref().map(|p| p.display().to_string()),
        "args": a,
    }))
}

pub fn bubble_verify(a: &BubbleVerifyArgs) -> CliResult<()> {
    let mut config = load_config(&a.config)?;
    if let Some(p) = a.paths {
        config.paths = p;
        config.validate()?;
    }
    let reports = master_equation_mc(&config, &a.strikes, a.barrier_override)?;
    let mut csv = String::from("strike,k0,lhs_price,mc_mean,mc_se,z,n_paths,n_crossed\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt_float(r.strike),
            fmt_float(r.k0),
            fmt_float(r.lhs_price),
            fmt_float(r.mc_mean),
            fmt_float(r.mc_se),
            fmt_float(r.z_score),
            r.n_paths,
            r.n_crossed
        ));
    }
    let out = Output::new(a.out.clone());
    out.write(&csv)?;
    out.sidecar(&json!({
        "command": "bubble-verify",
        "config": config,
        "barrier": a.barrier_override.unwrap_or_else(|| config.barrier()),
        "args": a,
    }))?;
    match reports.iter().find(|r| !(r.z_score.abs() <= Z_LIMIT)) {
        Some(r) => Err(CliError::Tolerance(format!("strike {}: |z| = {} > {Z_LIMIT}", r.strike, r.z_score.abs()))),
        None => Ok(()),
    }
}

/// Grid on which the inner-integral identity is checked.
pub fn inner_identity_grid() -> Vec<(f64, f64, f64)> {
    let mut g = Vec::with_capacity(45);
    for y in [0.0, 0.5, -0.5, 2.0, -2.0] {
        for a in [0.2, 1.0, 3.0] {
            for eta in [0.5, 0.97, 2.0] {
                g.push((y, a, eta));
            }
        }
    }
    g
}

/// Largest relative gap between quadrature and closed form on [`inner_identity_grid`].
pub fn inner_identity_residual(tol: f64) -> CliResult<f64> {
    let mut worst = 0.0f64;
    for (y, a, eta) in inner_identity_grid() {
        let q = inner_k1_quadrature(y, a, eta, 0.01 * tol)?;
        let c = inner_k1_closed_form(y, a, eta)?;
        worst = worst.max(((q - c) / c).abs());
    }
    Ok(worst)
}

pub fn bessel_check(a: &BesselCheckArgs) -> CliResult<()> {
    if !(a.psi > 0.0 && a.psi < 4.0) {
        return Err(CliError::Invalid(format!("psi must lie in (0, 4), got {}", a.psi)));
    }
    if a.beta_levels.is_empty() {
        return Err(CliError::Invalid("no beta levels".into()));
    }
    if let Some(b) = a.beta_levels.iter().find(|&&b| !(b > 0.0 && b < a.theta0)) {
        return Err(CliError::Invalid(format!("beta levels must lie in (0, theta0), got {b}")));
    }
    if !(a.tol > 0.0) || !(a.inner_tol > 0.0) {
        return Err(CliError::Invalid("tolerances must be positive".into()));
    }
    let lhs = stopped_option_value(1.0, a.k, a.theta0, a.psi);
    let mut rhs = Vec::with_capacity(a.beta_levels.len());
    for &b in &a.beta_levels {
        rhs.push(bs_bubble_rhs(a.k, a.theta0, a.psi, b, 0.01 * a.tol)?);
    }
    let max_vs_lhs = rhs.iter().map(|r| (r - lhs).abs()).fold(0.0, f64::max);
    let mut max_pairwise = 0.0f64;
    for (i, x) in rhs.iter().enumerate() {
        for y in &rhs[i + 1..] {
            max_pairwise = max_pairwise.max((x - y).abs());
        }
    }
    let inner = inner_identity_residual(a.inner_tol)?;

    let mut table = String::from("beta,rhs,lhs,abs_diff\n");
    for (b, r) in a.beta_levels.iter().zip(&rhs) {
        table.push_str(&format!("{},{},{},{}\n", fmt_float(*b), fmt_float(*r), fmt_float(lhs), fmt_float((r - lhs).abs())));
    }
    eprintln!("LHS                      = {lhs:.12}");
    eprintln!("max |RHS - LHS|          = {max_vs_lhs:.3e}");
    eprintln!("max pairwise |RHS - RHS| = {max_pairwise:.3e}");
    eprintln!("inner identity residual  = {inner:.3e} (relative, {} points)", inner_identity_grid().len());
    let out = Output::new(a.out.clone());
    out.write(&table)?;
    out.sidecar(&json!({
        "command": "bessel-check",
        "args": a,
        "lhs": lhs,
        "max_abs_rhs_minus_lhs": max_vs_lhs,
        "max_pairwise": max_pairwise,
        "inner_residual": inner,
    }))?;
    if max_vs_lhs > a.tol || max_pairwise > a.tol || inner > a.inner_tol {
        return Err(CliError::Tolerance(format!(
            "bessel identity outside tolerance: |RHS-LHS| {max_vs_lhs:.3e}, pairwise {max_pairwise:.3e}, inner {inner:.3e}"
        )));
    }
    Ok(())
}

/// Ratios `e_i / e_{i+1}` between consecutive refinement levels.
pub fn refinement_ratios(levels: &[RefinementLevel]) -> Vec<f64> {
    levels.windows(2).map(|w| w[0].error / w[1].error).collect()
}

pub fn heston_compare(a: &HestonCompareArgs) -> CliResult<()> {
    let config = load_config(&a.config)?;
    let study = heston_refinement_study(&config, &a.dt_list, a.fine_factor)?;
    let levels: Vec<RefinementLevel> = study.iter().map(|h| h.level).collect();
    let ratios = refinement_ratios(&levels);
    let order = fitted_order(&levels);

    let mut csv = String::from("dt,steps,error\n");
    for l in &levels {
        csv.push_str(&format!("{},{},{}\n", fmt_float(l.dt), l.steps, fmt_float(l.error)));
    }
    for (l, r) in levels.iter().skip(1).zip(&ratios) {
        eprintln!("dt = {:.3e}: error ratio {r:.3}", l.dt);
    }
    eprintln!("fitted order {order:.3}");
    let out = Output::new(a.out.clone());
    out.write(&csv)?;
    if let Some(p) = &a.profile {
        let mut csv = String::from("dt,t,mean_abs_error\n");
        for h in &study {
            for (i, e) in h.profile.iter().enumerate() {
                let t = config.maturity * i as f64 / h.level.steps as f64;
                csv.push_str(&format!("{},{},{}\n", fmt_float(h.level.dt), fmt_float(t), fmt_float(*e)));
            }
        }
        write_file(p, &csv)?;
    }
    out.sidecar(&json!({
        "command": "heston-compare",
        "config": config,
        "args": a,
        "fitted_order": order,
        "ratios": ratios,
    }))?;
    if ratios.iter().all(|r| *r >= MIN_REFINEMENT_RATIO) {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!(
            "refinement ratios {ratios:?} below {MIN_REFINEMENT_RATIO}"
        )))
    }
}
