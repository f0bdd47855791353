//! Command-line front end.
//!
//! Every run is described by a [`RunConfig`]. It is built from an optional
//! JSON config file with command-line flags layered on top, hashed, and
//! embedded in the output header so that any output can be replayed.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::{
    estimate_empirical_chi, mse_sweep, pooled_response, run_batch, symmetric_log_grid, BatchConfig, ExperimentReport,
    NodeSample, DEFAULT_FIT_WINDOW, DEFAULT_F_MAX, DEFAULT_F_MIN, DEFAULT_F_PER_SIDE, DEFAULT_NODE_SAMPLE,
};
use crate::finitetemp::{fdt_check, BETA_MAX};
use crate::meanfield::{
    recovery_threshold, scan_phase_boundary, solve_basis_pursuit_limit, solve_fixed_point, FixedPointOptions,
    FixedPointReport, MeanFieldState,
};
use crate::model::{EnsembleParams, PenaltyModel, SignalPrior, MAX_MATRIX_ENTRIES};
use crate::suscept::{verify_identities, SusceptibilityConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable holding the worker-pool size.
pub const WORKERS_ENV: &str = "L1CAVITY_WORKERS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PenaltyKind {
    L1,
    SmoothedL1,
    Ridge,
}

/// Which experiment table the CSV output holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    #[default]
    Response,
    Staircases,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanfieldParams {
    pub rho: f64,
    pub alpha: Vec<f64>,
    pub var0: f64,
    /// Solve the σ → 0 (basis pursuit) limit instead of finite σ.
    pub bp_limit: bool,
    pub penalty: PenaltyModel,
    pub sigma2: f64,
    pub sigma_zeta2: f64,
    pub tol: f64,
}

impl Default for MeanfieldParams {
    fn default() -> Self {
        Self {
            rho: 0.2,
            alpha: vec![0.35],
            var0: 1.0,
            bp_limit: false,
            penalty: PenaltyModel::L1 { lambda: 1.0 },
            sigma2: 1.0,
            sigma_zeta2: 0.0,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryParams {
    pub rho_grid: Vec<f64>,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub tol_alpha: f64,
    pub var0: f64,
}

impl Default for BoundaryParams {
    fn default() -> Self {
        Self {
            rho_grid: parse_grid("0.1:0.9:0.1").expect("default grid"),
            alpha_lo: 0.05,
            alpha_hi: 0.95,
            tol_alpha: 1e-3,
            var0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    /// Non-empty switches to the MSE sweep over these sampling ratios.
    pub alpha_grid: Vec<f64>,
    pub instances: usize,
    /// Sampled nodes per instance; 0 means all.
    pub nodes: usize,
    pub fit_window: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub f_per_side: usize,
    pub table: Table,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            n: 200,
            k: 40,
            alpha: 0.35,
            alpha_grid: Vec::new(),
            instances: 10,
            nodes: DEFAULT_NODE_SAMPLE,
            fit_window: DEFAULT_FIT_WINDOW,
            f_min: DEFAULT_F_MIN,
            f_max: DEFAULT_F_MAX,
            f_per_side: DEFAULT_F_PER_SIDE,
            table: Table::Response,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SusceptibilityParams {
    pub n: usize,
    pub m: usize,
    pub penalty: PenaltyModel,
    pub rho: f64,
    pub var0: f64,
    pub sigma2: f64,
    pub noise_var: f64,
    pub seeds: usize,
}

impl Default for SusceptibilityParams {
    fn default() -> Self {
        Self {
            n: 400,
            m: 200,
            penalty: PenaltyModel::Ridge { lambda: 1.0 },
            rho: 0.2,
            var0: 1.0,
            sigma2: 0.1,
            noise_var: 0.0,
            seeds: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinitetempParams {
    pub alpha: f64,
    pub rho: f64,
    pub var0: f64,
    pub penalty: PenaltyModel,
    pub sigma2: f64,
    pub sigma_zeta2: f64,
    pub beta_grid: Vec<f64>,
}

impl Default for FinitetempParams {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            rho: 0.2,
            var0: 1.0,
            penalty: PenaltyModel::SmoothedL1 {
                lambda: 2.0,
                epsilon: 1e-2,
            },
            sigma2: 0.5,
            sigma_zeta2: 0.0,
            beta_grid: vec![10.0, 100.0, 1000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum Command {
    Meanfield(MeanfieldParams),
    Boundary(BoundaryParams),
    Experiment(ExperimentParams),
    Susceptibility(SusceptibilityParams),
    Finitetemp(FinitetempParams),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Meanfield(_) => "meanfield",
            Command::Boundary(_) => "boundary",
            Command::Experiment(_) => "experiment",
            Command::Susceptibility(_) => "susceptibility",
            Command::Finitetemp(_) => "finitetemp",
        }
    }
}

/// Fully resolved description of one run.
///
/// The output path is not serialized: it does not affect the output bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub format: Format,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            seed: 0,
            format: Format::Csv,
            out: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// A grid written as `lo:hi:step`, a comma list, or a single value.
pub fn parse_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("bad number {t:?}: {e}"));
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [lo, hi, step] => {
            let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
            if !(step > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
                return Err(format!("grid {s:?} needs lo <= hi and step > 0"));
            }
            let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
            if count > 1_000_000 {
                return Err(format!("grid {s:?} has too many points"));
            }
            // Rounding keeps 0.1:0.9:0.1 at the decimal values.
            Ok((0..count).map(|i| round12(lo + step * i as f64)).collect())
        }
        [_] => s.split(',').map(num).collect(),
        _ => Err(format!("grid {s:?} must be lo:hi:step or a comma list")),
    }
}

fn round12(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let scale = 10f64.powi(12 - x.abs().log10().ceil() as i32);
    (x * scale).round() / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

fn grid_arg(s: &str) -> std::result::Result<Grid, String> {
    parse_grid(s).map(Grid)
}

#[derive(Debug, Parser)]
#[command(name = "l1cavity", version, about = "Cavity mean-field theory and finite-size experiments for l1 recovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (written atomically); stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct PenaltyArgs {
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Smoothing width for smoothed-l1.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

impl PenaltyArgs {
    fn apply(&self, current: PenaltyModel) -> PenaltyModel {
        let kind = self.penalty.unwrap_or(match current {
            PenaltyModel::L1 { .. } => PenaltyKind::L1,
            PenaltyModel::SmoothedL1 { .. } => PenaltyKind::SmoothedL1,
            PenaltyModel::Ridge { .. } => PenaltyKind::Ridge,
        });
        let lambda = self.lambda.unwrap_or(current.lambda());
        let epsilon = self.epsilon.unwrap_or(match current {
            PenaltyModel::SmoothedL1 { epsilon, .. } => epsilon,
            _ => 1e-2,
        });
        match kind {
            PenaltyKind::L1 => PenaltyModel::L1 { lambda },
            PenaltyKind::SmoothedL1 => PenaltyModel::SmoothedL1 { lambda, epsilon },
            PenaltyKind::Ridge => PenaltyModel::Ridge { lambda },
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Solve the mean-field fixed point at one or more sampling ratios.
    Meanfield {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rho: Option<f64>,
        /// Sampling ratio(s): value, comma list or lo:hi:step.
        #[arg(long, value_parser = grid_arg)]
        alpha: Option<Grid>,
        #[arg(long)]
        var0: Option<f64>,
        /// Basis-pursuit (σ → 0) limit.
        #[arg(long)]
        bp_limit: bool,
        #[command(flatten)]
        penalty: PenaltyArgs,
        #[arg(long)]
        sigma2: Option<f64>,
        #[arg(long)]
        sigma_zeta2: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Scan the recovery phase boundary alpha_c(rho).
    Boundary {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = grid_arg)]
        rho_grid: Option<Grid>,
        #[arg(long)]
        alpha_lo: Option<f64>,
        #[arg(long)]
        alpha_hi: Option<f64>,
        #[arg(long)]
        tol_alpha: Option<f64>,
        #[arg(long)]
        var0: Option<f64>,
    },
    /// Perturbed basis-pursuit experiments, or an MSE sweep with --alpha-grid.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_parser = grid_arg)]
        alpha_grid: Option<Grid>,
        #[arg(long)]
        instances: Option<usize>,
        /// Sampled nodes per instance (0 = all).
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        fit_window: Option<f64>,
        #[arg(long)]
        f_min: Option<f64>,
        #[arg(long)]
        f_max: Option<f64>,
        #[arg(long)]
        f_per_side: Option<usize>,
        #[arg(long, value_enum)]
        table: Option<Table>,
    },
    /// Exact susceptibility matrices against the resummed formula.
    Susceptibility {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[command(flatten)]
        penalty: PenaltyArgs,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        var0: Option<f64>,
        #[arg(long)]
        sigma2: Option<f64>,
        #[arg(long)]
        noise_var: Option<f64>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Finite-temperature fixed points and the beta*dQ -> chi check.
    Finitetemp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        var0: Option<f64>,
        #[command(flatten)]
        penalty: PenaltyArgs,
        #[arg(long)]
        sigma2: Option<f64>,
        #[arg(long)]
        sigma_zeta2: Option<f64>,
        #[arg(long, value_parser = grid_arg)]
        beta_grid: Option<Grid>,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_base(common: &Common, default: Command) -> Result<RunConfig> {
    let Some(path) = &common.config else {
        return Ok(RunConfig::new(default));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = RunConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if cfg.command.name() != default.name() {
        return Err(Error::Config(format!(
            "config {} is for '{}', not '{}'",
            path.display(),
            cfg.command.name(),
            default.name()
        )));
    }
    Ok(cfg)
}

/// Merges the config file (if any) with flags and validates the result.
pub fn resolve(sub: Sub) -> Result<RunConfig> {
    let (common, mut cfg) = match sub {
        Sub::Meanfield {
            common,
            rho,
            alpha,
            var0,
            bp_limit,
            penalty,
            sigma2,
            sigma_zeta2,
            tol,
        } => {
            let mut cfg = load_base(&common, Command::Meanfield(Default::default()))?;
            if let Command::Meanfield(p) = &mut cfg.command {
                set(&mut p.rho, rho);
                set(&mut p.alpha, alpha.map(|g| g.0));
                set(&mut p.var0, var0);
                p.bp_limit |= bp_limit;
                p.penalty = penalty.apply(p.penalty);
                set(&mut p.sigma2, sigma2);
                set(&mut p.sigma_zeta2, sigma_zeta2);
                set(&mut p.tol, tol);
            }
            (common, cfg)
        }
        Sub::Boundary {
            common,
            rho_grid,
            alpha_lo,
            alpha_hi,
            tol_alpha,
            var0,
        } => {
            let mut cfg = load_base(&common, Command::Boundary(Default::default()))?;
            if let Command::Boundary(p) = &mut cfg.command {
                set(&mut p.rho_grid, rho_grid.map(|g| g.0));
                set(&mut p.alpha_lo, alpha_lo);
                set(&mut p.alpha_hi, alpha_hi);
                set(&mut p.tol_alpha, tol_alpha);
                set(&mut p.var0, var0);
            }
            (common, cfg)
        }
        Sub::Experiment {
            common,
            n,
            k,
            alpha,
            alpha_grid,
            instances,
            nodes,
            fit_window,
            f_min,
            f_max,
            f_per_side,
            table,
        } => {
            let mut cfg = load_base(&common, Command::Experiment(Default::default()))?;
            if let Command::Experiment(p) = &mut cfg.command {
                set(&mut p.n, n);
                set(&mut p.k, k);
                set(&mut p.alpha, alpha);
                set(&mut p.alpha_grid, alpha_grid.map(|g| g.0));
                set(&mut p.instances, instances);
                set(&mut p.nodes, nodes);
                set(&mut p.fit_window, fit_window);
                set(&mut p.f_min, f_min);
                set(&mut p.f_max, f_max);
                set(&mut p.f_per_side, f_per_side);
                set(&mut p.table, table);
            }
            (common, cfg)
        }
        Sub::Susceptibility {
            common,
            n,
            m,
            penalty,
            rho,
            var0,
            sigma2,
            noise_var,
            seeds,
        } => {
            let mut cfg = load_base(&common, Command::Susceptibility(Default::default()))?;
            if let Command::Susceptibility(p) = &mut cfg.command {
                set(&mut p.n, n);
                set(&mut p.m, m);
                p.penalty = penalty.apply(p.penalty);
                set(&mut p.rho, rho);
                set(&mut p.var0, var0);
                set(&mut p.sigma2, sigma2);
                set(&mut p.noise_var, noise_var);
                set(&mut p.seeds, seeds);
            }
            (common, cfg)
        }
        Sub::Finitetemp {
            common,
            alpha,
            rho,
            var0,
            penalty,
            sigma2,
            sigma_zeta2,
            beta_grid,
        } => {
            let mut cfg = load_base(&common, Command::Finitetemp(Default::default()))?;
            if let Command::Finitetemp(p) = &mut cfg.command {
                set(&mut p.alpha, alpha);
                set(&mut p.rho, rho);
                set(&mut p.var0, var0);
                p.penalty = penalty.apply(p.penalty);
                set(&mut p.sigma2, sigma2);
                set(&mut p.sigma_zeta2, sigma_zeta2);
                set(&mut p.beta_grid, beta_grid.map(|g| g.0));
            }
            (common, cfg)
        }
    };
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.format, common.format);
    if common.out.is_some() {
        cfg.out = common.out;
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn cfg_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(cfg_err(field, msg))
    }
}

/// Rejects parameter values the pipelines cannot run with.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    let pen = |p: PenaltyModel| p.validated().map(|_| ()).map_err(|e| cfg_err("penalty", e));
    let prior = |rho: f64, var0: f64| SignalPrior::new(rho, var0).map(|_| ()).map_err(|e| cfg_err("rho/var0", e));
    match &cfg.command {
        Command::Meanfield(p) => {
            prior(p.rho, p.var0)?;
            pen(p.penalty)?;
            check(!p.alpha.is_empty(), "alpha", "grid is empty")?;
            check(p.tol > 0.0, "tol", "must be > 0")?;
            for &a in &p.alpha {
                if p.bp_limit {
                    check(a > 0.0 && a <= 1.0, "alpha", "must lie in (0, 1] in the basis-pursuit limit")?;
                } else {
                    EnsembleParams::new(a, p.sigma2, p.sigma_zeta2).map_err(|e| cfg_err("alpha/sigma2", e))?;
                }
            }
            if p.bp_limit {
                check(p.rho > 0.0 && p.rho < 1.0, "rho", "must lie in (0, 1) in the basis-pursuit limit")?;
                check(p.sigma_zeta2 >= 0.0, "sigma_zeta2", "must be >= 0")?;
            } else {
                check(p.sigma2 > 0.0, "sigma2", "must be > 0 (use --bp-limit for sigma -> 0)")?;
            }
        }
        Command::Boundary(p) => {
            check(!p.rho_grid.is_empty(), "rho_grid", "grid is empty")?;
            check(p.rho_grid.iter().all(|r| *r > 0.0 && *r < 1.0), "rho_grid", "values must lie in (0, 1)")?;
            check(p.alpha_lo > 0.0 && p.alpha_lo < p.alpha_hi && p.alpha_hi <= 1.0, "alpha_lo/alpha_hi", "need 0 < lo < hi <= 1")?;
            check(p.tol_alpha > 0.0, "tol_alpha", "must be > 0")?;
            check(p.var0 > 0.0 && p.var0.is_finite(), "var0", "must be > 0")?;
        }
        Command::Experiment(p) => {
            check(p.n > 0, "n", "must be > 0")?;
            check(p.k <= p.n, "k", "must not exceed n")?;
            check(p.instances > 0, "instances", "must be > 0")?;
            if p.alpha_grid.is_empty() {
                check(p.alpha > 0.0 && p.alpha <= 1.0, "alpha", "must lie in (0, 1]")?;
                check(p.nodes <= p.n, "nodes", "must not exceed n")?;
                check(p.fit_window > 0.0, "fit_window", "must be > 0")?;
                symmetric_log_grid(p.f_min, p.f_max, p.f_per_side).map_err(|e| cfg_err("f_min/f_max", e))?;
            } else {
                check(p.alpha_grid.iter().all(|a| *a > 0.0 && *a <= 1.0), "alpha_grid", "values must lie in (0, 1]")?;
                check(p.k > 0 && p.k < p.n, "k", "sweep needs 0 < k < n")?;
            }
            check(p.n.saturating_mul(p.n) <= MAX_MATRIX_ENTRIES, "n", "instance exceeds the matrix size cap")?;
        }
        Command::Susceptibility(p) => {
            pen(p.penalty)?;
            check(p.penalty.is_smooth(), "penalty", "must be smooth (smoothed-l1 or ridge)")?;
            prior(p.rho, p.var0)?;
            check(p.n > 0 && p.m > 0, "n/m", "must be > 0")?;
            check(p.n.saturating_mul(p.m) <= MAX_MATRIX_ENTRIES, "n/m", "instance exceeds the matrix size cap")?;
            check(p.seeds > 0, "seeds", "must be > 0")?;
            check(p.sigma2 > 0.0 && p.sigma2.is_finite(), "sigma2", "must be > 0")?;
            check(p.noise_var >= 0.0 && p.noise_var.is_finite(), "noise_var", "must be >= 0")?;
        }
        Command::Finitetemp(p) => {
            pen(p.penalty)?;
            prior(p.rho, p.var0)?;
            EnsembleParams::new(p.alpha, p.sigma2, p.sigma_zeta2).map_err(|e| cfg_err("alpha/sigma2", e))?;
            check(p.sigma2 > 0.0, "sigma2", "must be > 0")?;
            check(!p.beta_grid.is_empty(), "beta_grid", "grid is empty")?;
            check(p.beta_grid.windows(2).all(|w| w[1] > w[0]), "beta_grid", "must be strictly increasing")?;
            check(p.beta_grid.iter().all(|b| *b > 0.0 && *b <= BETA_MAX), "beta_grid", "values must lie in (0, 1e6]")?;
        }
    }
    Ok(())
}

/// Rendered output of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub text: String,
    /// Per-point failures; non-empty means a partial run.
    pub failures: Vec<String>,
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

struct Table2 {
    summary: Vec<(String, String)>,
    header: &'static str,
    rows: Vec<String>,
}

fn render(cfg: &RunConfig, table: Table2, result: Value, failures: Vec<String>) -> RunOutput {
    let hash = cfg.hash();
    let text = match cfg.format {
        Format::Csv => {
            let mut s = format!(
                "# l1cavity {VERSION}\n# command={} seed={} config_sha256={hash}\n# config={}\n",
                cfg.command.name(),
                cfg.seed,
                cfg.to_json()
            );
            for (k, v) in &table.summary {
                s.push_str(&format!("# {k}={v}\n"));
            }
            s.push_str(table.header);
            s.push('\n');
            for r in &table.rows {
                s.push_str(r);
                s.push('\n');
            }
            s
        }
        Format::Json => {
            let doc = json!({
                "tool": "l1cavity",
                "version": VERSION,
                "command": cfg.command.name(),
                "seed": cfg.seed,
                "config_sha256": hash,
                "config": cfg,
                "result": result,
                "failures": failures,
            });
            let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
            s.push('\n');
            s
        }
    };
    RunOutput { text, failures }
}

/// Runs the pipeline named by `cfg` and renders its output.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    validate(cfg)?;
    match &cfg.command {
        Command::Meanfield(p) => run_meanfield(cfg, p),
        Command::Boundary(p) => run_boundary(cfg, p),
        Command::Experiment(p) if p.alpha_grid.is_empty() => run_experiment(cfg, p),
        Command::Experiment(p) => run_sweep(cfg, p),
        Command::Susceptibility(p) => run_susceptibility(cfg, p),
        Command::Finitetemp(p) => run_finitetemp(cfg, p),
    }
}

#[derive(Serialize)]
struct MeanfieldRow {
    rho: f64,
    alpha: f64,
    report: Option<FixedPointReport>,
    recovered: Option<bool>,
    error: Option<String>,
}

fn run_meanfield(cfg: &RunConfig, p: &MeanfieldParams) -> Result<RunOutput> {
    let prior = SignalPrior::new(p.rho, p.var0)?;
    let solve = |alpha: f64| -> Result<FixedPointReport> {
        if p.bp_limit {
            solve_basis_pursuit_limit(alpha, &prior, p.sigma_zeta2, p.tol)
        } else {
            let params = EnsembleParams::new(alpha, p.sigma2, p.sigma_zeta2)?;
            let init = MeanFieldState::initial(&params, &p.penalty, &prior);
            let opts = FixedPointOptions {
                tol: p.tol,
                ..Default::default()
            };
            solve_fixed_point(&params, &p.penalty, &prior, &init, &opts)
        }
    };
    let rows: Vec<MeanfieldRow> = p
        .alpha
        .par_iter()
        .map(|&alpha| match solve(alpha) {
            Ok(rep) => MeanfieldRow {
                rho: p.rho,
                alpha,
                recovered: Some(rep.state.q <= recovery_threshold(&prior)),
                report: Some(rep),
                error: None,
            },
            Err(e) => MeanfieldRow {
                rho: p.rho,
                alpha,
                report: None,
                recovered: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for r in &rows {
        match (&r.report, &r.error) {
            (Some(rep), _) => {
                if !rep.converged {
                    failures.push(format!(
                        "alpha={}: not converged after {} iterations (residual {:e}{})",
                        fmt_f64(r.alpha),
                        rep.iterations,
                        rep.residual,
                        if rep.diverged { ", diverged" } else { "" }
                    ));
                }
                let s = rep.state;
                lines.push(format!(
                    "{},{},{},{},{},{},{},{},{}",
                    fmt_f64(r.rho),
                    fmt_f64(r.alpha),
                    fmt_f64(s.q),
                    fmt_f64(s.chi_bar),
                    fmt_f64(s.theta),
                    fmt_f64(s.sigma_xi2),
                    rep.converged,
                    rep.iterations,
                    r.recovered.unwrap_or(false)
                ));
            }
            (None, err) => {
                let e = err.clone().unwrap_or_default();
                failures.push(format!("alpha={}: {e}", fmt_f64(r.alpha)));
                lines.push(format!("{},{},,,,,false,0,", fmt_f64(r.rho), fmt_f64(r.alpha)));
            }
        }
    }
    let table = Table2 {
        summary: vec![],
        header: "rho,alpha,q,chi_bar,theta,sigma_xi2,converged,iterations,recovered",
        rows: lines,
    };
    Ok(render(cfg, table, json!(rows), failures))
}

fn run_boundary(cfg: &RunConfig, p: &BoundaryParams) -> Result<RunOutput> {
    let points = scan_phase_boundary(&p.rho_grid, (p.alpha_lo, p.alpha_hi), p.tol_alpha, p.var0);
    let failures: Vec<String> = points
        .iter()
        .filter_map(|b| b.error.as_ref().map(|e| format!("rho={}: {e}", fmt_f64(b.rho))))
        .collect();
    let rows = points
        .iter()
        .map(|b| {
            format!(
                "{},{},{},{}",
                fmt_f64(b.rho),
                fmt_opt(b.alpha_c),
                fmt_f64(b.tol_alpha),
                fmt_opt(b.alpha_c_linear)
            )
        })
        .collect();
    let table = Table2 {
        summary: vec![],
        header: "rho,alpha_c,tol_alpha,alpha_c_linear",
        rows,
    };
    Ok(render(cfg, table, json!(points), failures))
}

fn run_experiment(cfg: &RunConfig, p: &ExperimentParams) -> Result<RunOutput> {
    let batch = BatchConfig {
        n: p.n,
        k: p.k,
        alpha: p.alpha,
        instances: p.instances,
        node_sample: if p.nodes == 0 {
            NodeSample::All
        } else {
            NodeSample::Count(p.nodes)
        },
        f_grid: symmetric_log_grid(p.f_min, p.f_max, p.f_per_side)?,
        fit_window: p.fit_window,
        seed: cfg.seed,
    };
    let outcomes = run_batch(&batch)?;
    let mut failures = Vec::new();
    let mut reports: Vec<(usize, ExperimentReport)> = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => {
                for c in &r.failures {
                    failures.push(format!("instance={i} node={} f={}: {}", c.node, fmt_f64(c.f), c.reason));
                }
                reports.push((i, r));
            }
            Err(e) => failures.push(format!("instance={i}: {e}")),
        }
    }
    if reports.is_empty() {
        return Err(Error::Numerical(format!("all {} instances failed", p.instances)));
    }
    let plain: Vec<ExperimentReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    let (grid, avg, pooled_fit) = pooled_response(&plain)?;
    let per_instance = estimate_empirical_chi(&plain).ok();
    let mut mses: Vec<f64> = plain.iter().map(|r| r.mse_empirical).collect();
    mses.sort_by(|a, b| a.total_cmp(b));
    let median_mse = crate::experiment::quantile(&mses, 0.5);

    let mut summary = vec![
        ("instances_ok".to_string(), plain.len().to_string()),
        ("pooled_fitted_chi".to_string(), fmt_opt(pooled_fit)),
        ("mse_median".to_string(), fmt_f64(median_mse)),
    ];
    if let Some((m, se)) = per_instance {
        summary.push(("instance_chi_mean".to_string(), fmt_f64(m)));
        summary.push(("instance_chi_stderr".to_string(), fmt_f64(se)));
    }
    let (header, rows) = match p.table {
        Table::Response => (
            "f,avg_response",
            grid.iter().zip(&avg).map(|(f, a)| format!("{},{}", fmt_f64(*f), fmt_f64(*a))).collect(),
        ),
        Table::Staircases => {
            let mut rows = Vec::new();
            for (i, r) in &reports {
                for (node, stair) in r.response.node_ids.iter().zip(&r.response.staircases) {
                    for (f, u) in r.response.f_grid.iter().zip(stair) {
                        rows.push(format!("{i},{node},{},{}", fmt_f64(*f), fmt_opt(*u)));
                    }
                }
            }
            ("instance,node,f,u_a", rows)
        }
    };
    let result = json!({
        "reports": reports.iter().map(|(i, r)| json!({"instance": i, "report": r})).collect::<Vec<_>>(),
        "pooled": {"f_grid": grid, "avg_response": avg, "fitted_chi": pooled_fit},
        "instance_chi": per_instance.map(|(m, se)| json!({"mean": m, "stderr": se})),
        "mse_median": median_mse,
    });
    Ok(render(cfg, Table2 { summary, header, rows }, result, failures))
}

fn run_sweep(cfg: &RunConfig, p: &ExperimentParams) -> Result<RunOutput> {
    let rho = p.k as f64 / p.n as f64;
    let rows = mse_sweep(&p.alpha_grid, rho, p.n, p.instances, cfg.seed)?;
    let failures = rows
        .iter()
        .filter(|r| r.n_fail > 0)
        .map(|r| format!("alpha={}: {} of {} instances failed", fmt_f64(r.alpha), r.n_fail, p.instances))
        .collect();
    let lines = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                fmt_f64(r.alpha),
                fmt_f64(r.mse_median),
                fmt_f64(r.mse_iqr),
                fmt_opt(r.q_meanfield),
                r.n_fail
            )
        })
        .collect();
    let table = Table2 {
        summary: vec![("rho".to_string(), fmt_f64(rho))],
        header: "alpha,mse_median,mse_iqr,q_meanfield,n_fail",
        rows: lines,
    };
    Ok(render(cfg, table, json!(rows), failures))
}

fn run_susceptibility(cfg: &RunConfig, p: &SusceptibilityParams) -> Result<RunOutput> {
    let scfg = SusceptibilityConfig {
        n: p.n,
        m: p.m,
        penalty: p.penalty,
        prior: SignalPrior::new(p.rho, p.var0)?,
        sigma2: p.sigma2,
        noise_var: p.noise_var,
        seeds: p.seeds,
        seed: cfg.seed,
    };
    let rep = verify_identities(&scfg)?;
    let failures = rep.skipped.iter().map(|(s, e)| format!("seed={s}: {e}")).collect();
    let rows = rep
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.seed,
                r.n,
                r.m,
                fmt_f64(r.diag_mean),
                fmt_f64(r.chi_bar_resummed),
                fmt_f64(r.offdiag_rms),
                fmt_f64(r.trace_lhs),
                fmt_f64(r.trace_rhs)
            )
        })
        .collect();
    let summary = vec![
        ("chi_matrix_diag_mean".to_string(), fmt_f64(rep.chi_matrix_diag_mean)),
        ("chi_bar_resummed".to_string(), fmt_f64(rep.chi_bar_resummed)),
        ("offdiag_rms".to_string(), fmt_f64(rep.offdiag_rms)),
        ("self_energy".to_string(), fmt_f64(rep.self_energy)),
        ("trace_identity_lhs".to_string(), fmt_f64(rep.trace_identity_lhs)),
        ("trace_identity_rhs".to_string(), fmt_f64(rep.trace_identity_rhs)),
    ];
    let table = Table2 {
        summary,
        header: "seed,N,M,diag_mean,chi_bar_resummed,offdiag_rms,trace_lhs,trace_rhs",
        rows,
    };
    Ok(render(cfg, table, json!(rep), failures))
}

fn run_finitetemp(cfg: &RunConfig, p: &FinitetempParams) -> Result<RunOutput> {
    let params = EnsembleParams::new(p.alpha, p.sigma2, p.sigma_zeta2)?;
    let prior = SignalPrior::new(p.rho, p.var0)?;
    let rows = fdt_check(&params, &p.penalty, &prior, &p.beta_grid)?;
    let failures = rows
        .iter()
        .filter(|r| !r.converged)
        .map(|r| format!("beta={}: fixed point not converged", fmt_f64(r.beta)))
        .collect();
    let lines = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                fmt_f64(r.beta),
                fmt_f64(r.q),
                fmt_f64(r.delta_q),
                fmt_f64(r.beta_delta_q),
                fmt_f64(r.chi_bar_ref),
                fmt_f64(r.rel_err)
            )
        })
        .collect();
    let table = Table2 {
        summary: vec![],
        header: "beta,q,delta_Q,beta_deltaQ,chi_bar_ref,rel_err",
        rows: lines,
    };
    Ok(render(cfg, table, json!(rows), failures))
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".failures.json");
    PathBuf::from(s)
}

fn configure_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool that already exists (e.g. in tests) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args`, runs, writes outputs, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return EXIT_CONFIG;
    }
    let cfg = match resolve(cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let output = match execute(&cfg) {
        Ok(o) => o,
        Err(e @ (Error::Config(_) | Error::Domain(_))) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_PARTIAL;
        }
    };
    let written = match &cfg.out {
        Some(path) => write_atomic(path, &output.text),
        None => std::io::stdout().write_all(output.text.as_bytes()).map_err(Error::from),
    };
    if let Err(e) = written {
        eprintln!("error: writing output: {e}");
        return EXIT_PARTIAL;
    }
    if output.failures.is_empty() {
        return EXIT_OK;
    }
    let manifest = json!({
        "command": cfg.command.name(),
        "seed": cfg.seed,
        "config_sha256": cfg.hash(),
        "failures": output.failures,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    match &cfg.out {
        Some(path) => {
            let mpath = manifest_path(path);
            if let Err(e) = write_atomic(&mpath, &text) {
                eprintln!("error: writing failure manifest: {e}");
            } else {
                eprintln!("partial run: {} failures listed in {}", output.failures.len(), mpath.display());
            }
        }
        None => eprint!("partial run, failures:\n{text}"),
    }
    EXIT_PARTIAL
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("0.1:0.9:0.1").unwrap(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(parse_grid("0.35").unwrap(), vec![0.35]);
        assert_eq!(parse_grid("10,100, 1000").unwrap(), vec![10.0, 100.0, 1000.0]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("a").is_err());
        assert!(parse_grid("0:1").is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0, 1e-10, 0.30000000000000004, 123456.789, -2.5e300] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(0.1), "0.1");
    }

    #[test]
    fn config_round_trips() {
        for cmd in [
            Command::Meanfield(Default::default()),
            Command::Boundary(Default::default()),
            Command::Experiment(Default::default()),
            Command::Susceptibility(Default::default()),
            Command::Finitetemp(Default::default()),
        ] {
            let cfg = RunConfig {
                seed: 17,
                format: Format::Json,
                ..RunConfig::new(cmd)
            };
            let back = RunConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"command":{"name":"boundary","params":{"rho_grid":[0.2],"bogus":1}},"seed":1}"#;
        let err = RunConfig::from_json(bad).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let bad_top = r#"{"command":{"name":"boundary","params":{}},"extra":1}"#;
        assert!(RunConfig::from_json(bad_top).is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"command":{"name":"meanfield","params":{"rho":0.3,"alpha":[0.5]}},"seed":4}"#,
        )
        .unwrap();
        let cli = Cli::try_parse_from(["l1cavity", "meanfield", "--config", path.to_str().unwrap(), "--rho", "0.1"]).unwrap();
        let cfg = resolve(cli.command).unwrap();
        let Command::Meanfield(p) = &cfg.command else { panic!() };
        assert_eq!(p.rho, 0.1);
        assert_eq!(p.alpha, vec![0.5]);
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn mismatched_config_command_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"command":{"name":"boundary","params":{}}}"#).unwrap();
        let cli = Cli::try_parse_from(["l1cavity", "meanfield", "--config", path.to_str().unwrap()]).unwrap();
        assert!(matches!(resolve(cli.command), Err(Error::Config(_))));
    }

    #[test]
    fn penalty_flags_rebuild_model() {
        let args = PenaltyArgs {
            penalty: Some(PenaltyKind::SmoothedL1),
            lambda: None,
            epsilon: Some(0.05),
        };
        assert_eq!(
            args.apply(PenaltyModel::Ridge { lambda: 3.0 }),
            PenaltyModel::SmoothedL1 {
                lambda: 3.0,
                epsilon: 0.05
            }
        );
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let cli = Cli::try_parse_from(["l1cavity", "susceptibility", "--penalty", "l1"]).unwrap();
        assert!(matches!(resolve(cli.command), Err(Error::Config(_))));
        let cli = Cli::try_parse_from(["l1cavity", "finitetemp", "--beta-grid", "100,10"]).unwrap();
        assert!(matches!(resolve(cli.command), Err(Error::Config(_))));
    }

    #[test]
    fn csv_header_carries_provenance() {
        let cfg = RunConfig {
            seed: 3,
            ..RunConfig::new(Command::Meanfield(MeanfieldParams {
                alpha: vec![0.6],
                bp_limit: true,
                ..Default::default()
            }))
        };
        let out = execute(&cfg).unwrap();
        let lines: Vec<&str> = out.text.lines().collect();
        assert!(lines[0].starts_with("# l1cavity "));
        assert!(lines[1].contains(&format!("config_sha256={}", cfg.hash())));
        assert!(lines[1].contains("seed=3"));
        let embedded = lines[2].strip_prefix("# config=").unwrap();
        assert_eq!(RunConfig::from_json(embedded).unwrap(), cfg);
        assert_eq!(lines[3], "rho,alpha,q,chi_bar,theta,sigma_xi2,converged,iterations,recovered");
        assert!(lines[4].ends_with(",true"));
        assert!(out.failures.is_empty());
    }
}
