//! The `ergokit` command-line front end.
//!
//! Every subcommand reads one [`RunConfig`] (flags, optionally layered over a
//! JSON file given with `--config`), runs a single analysis and writes either
//! a JSON document or a CSV table. The resolved configuration is echoed into
//! the JSON output, so feeding that `config` object back through `--config`
//! repeats the run exactly.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors (the message
//! names the offending flag), 2 when a numerical method does not converge or a
//! requested matrix power is below the certified threshold.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::invariant::{
    doeblin_lower_bound, ergodic_components, mixing_time, spectral_gap_detailed, stationarity_residual,
    stationary,
};
use crate::linalg::{total_variation, MatVec};
use crate::maps::MapKind;
use crate::matpow::{
    apply_power_polynomial, build_power_polynomial, parse_power, polynomial_degree, power_by_squaring, t_min,
    MAX_DENSE_DIM,
};
use crate::memory::{check_scaling_eps, fit_slope, memory_table, ResolutionRule, DEFAULT_MAX_ITER};
use crate::transfer::{build_piecewise, build_ulam, PiecewiseOptions, DEFAULT_QUAD_ORDER};
use crate::{Error, MapSpec, NoiseKernel, Representation, TransferMatrix};

pub const SCHEMA_VERSION: &str = "1.0.0";

/// JSON Schema for every document the CLI writes.
pub const RESULT_SCHEMA: &str = include_str!("../schema/result.schema.json");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

const DEFAULT_BINS: usize = 256;
const DEFAULT_DEGREE: usize = 8;
const DEFAULT_TOL: f64 = 1e-10;
const DEFAULT_MEMORY_TOL: f64 = 1e-9;
const DEFAULT_MIX_TARGET: f64 = 1e-6;
const DEFAULT_BITS: u32 = 16;
const DOEBLIN_GRID: usize = 64;
const GAP_MAX_ITER: usize = 20_000;
const MC_BURN_IN: u64 = 1_000;
/// Columns compared against repeated squaring when the matrix is larger.
const POWER_COLUMNS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "ergokit", version, about = "Invariant measures, spectral gaps and memory of noisy interval maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stationary density with residual, spectral gap and mixing time.
    Invariant(InvariantArgs),
    /// Capacity of the one-step channel for one or more noise widths.
    Memory(MemoryArgs),
    /// Ergodic decomposition of the Ulam chain.
    Ergodic(ErgodicArgs),
    /// Spectral gap next to the Doeblin lower bound.
    Gap(RunArgs),
    /// A huge power of the Ulam matrix via a Chebyshev polynomial, checked
    /// against repeated squaring.
    Power(PowerArgs),
    /// The discretized transfer matrix.
    Matrix(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Invariant(_) => "invariant",
            Command::Memory(_) => "memory",
            Command::Ergodic(_) => "ergodic",
            Command::Gap(_) => "gap",
            Command::Power(_) => "power",
            Command::Matrix(_) => "matrix",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags given on the command line take precedence.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Built-in map name (logistic, doubling, tent, rotation, identity,
    /// piecewise-const) or an expression in `x`.
    #[arg(long)]
    pub map: Option<String>,
    /// Map parameter; repeatable.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    pub params: Vec<String>,
    /// Clip map values to [0,1] instead of rejecting the map.
    #[arg(long)]
    pub clamp: bool,
    /// Noise kernel as `family:epsilon[:boundary]`, e.g. `gaussian:0.05:wrap`.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Number of Ulam bins (default 256).
    #[arg(long)]
    pub bins: Option<usize>,
    /// Width of a polynomial piece; selects the piecewise-polynomial representation.
    #[arg(long)]
    pub piece_width: Option<f64>,
    /// Legendre degree per piece (default 8).
    #[arg(long)]
    pub degree: Option<usize>,
    /// Solver tolerance (default 1e-10; 1e-9 for memory)
    #[arg(long)]
    pub tol: Option<f64>,
    /// Seed for Monte Carlo orbits and sampled columns (default 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Output format (default json)
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct InvariantArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Length of a seeded noisy orbit compared against the stationary density.
    #[arg(long)]
    pub mc_steps: Option<u64>,
    /// Total-variation target for the mixing time.
    #[arg(long)]
    pub mix_target: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct MemoryArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated noise widths; defaults to the kernel's epsilon.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct ErgodicArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Entries at or below this are not edges of the support graph.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct PowerArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Exponent `T`, e.g. `2^40` or `1000000`.
    #[arg(long)]
    pub power: Option<String>,
    /// Target accuracy `2^-n` (default 16).
    #[arg(long)]
    pub bits: Option<u32>,
    /// Spectral gap to assume; measured when absent.
    #[arg(long)]
    pub gamma: Option<f64>,
}

/// Everything that determines a run. Unset fields take command defaults,
/// which are filled in before the configuration is echoed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    pub clamp: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub piece_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mix_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl RunConfig {
    /// Fields set in `top` replace those in `self`; parameters are merged.
    fn overlay(mut self, top: RunConfig) -> RunConfig {
        macro_rules! take {
            ($($f:ident),*) => { $( if top.$f.is_some() { self.$f = top.$f; } )* };
        }
        take!(
            map, kernel, bins, piece_width, degree, tol, seed, format, eps, power, bits, gamma, mc_steps,
            mix_target, threshold
        );
        self.clamp |= top.clamp;
        self.params.extend(top.params);
        self
    }
}

/// A failed run: exit code and the message for standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn usage(flag: &str, msg: impl fmt::Display) -> Failure {
    Failure { code: EXIT_CONFIG, message: format!("{flag}: {msg}") }
}

/// Library errors raised while computing; configuration problems are caught
/// earlier and carry a flag name.
fn numeric(e: Error) -> Failure {
    let code = match e {
        Error::NotConverged { .. }
        | Error::PowerTooSmall { .. }
        | Error::NotMixing(_)
        | Error::CertificateFailed(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    };
    Failure { code, message: e.to_string() }
}

enum Resolution {
    Bins(usize),
    Pieces { piece_width: f64, degree: usize },
}

struct Setup {
    map: MapSpec,
    kernel: NoiseKernel,
    resolution: Resolution,
    tol: f64,
    seed: u64,
}

/// What a command hands back before the envelope is added.
struct Outcome {
    result: Value,
    csv: String,
    iterations: u64,
    residual: f64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Results go to `--output` or `stdout`, messages to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let shown = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(shown.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = stderr.write_all(shown.as_bytes());
                    EXIT_CONFIG
                }
            };
        }
    };
    match execute(&cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn execute(command: &Command, stdout: &mut dyn Write) -> Result<(), Failure> {
    let start = Instant::now();
    let (run, extra) = match command {
        Command::Invariant(a) => {
            (&a.run, RunConfig { mc_steps: a.mc_steps, mix_target: a.mix_target, ..Default::default() })
        }
        Command::Memory(a) => (&a.run, RunConfig { eps: a.eps.clone(), ..Default::default() }),
        Command::Ergodic(a) => (&a.run, RunConfig { threshold: a.threshold, ..Default::default() }),
        Command::Power(a) => {
            (&a.run, RunConfig { power: a.power.clone(), bits: a.bits, gamma: a.gamma, ..Default::default() })
        }
        Command::Gap(r) | Command::Matrix(r) => (r, RunConfig::default()),
    };
    let from_flags = flags_config(run)?.overlay(extra);
    let base = match &run.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage("--config", format!("{}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| usage("--config", e))?
        }
        None => RunConfig::default(),
    };
    let mut cfg = base.overlay(from_flags);
    fill_defaults(command, &mut cfg)?;
    let setup = setup(command, &cfg)?;

    let outcome = match command {
        Command::Invariant(_) => cmd_invariant(&setup, &cfg)?,
        Command::Memory(_) => cmd_memory(&setup, &cfg)?,
        Command::Ergodic(_) => cmd_ergodic(&setup, &cfg)?,
        Command::Gap(_) => cmd_gap(&setup)?,
        Command::Power(_) => cmd_power(&setup, &cfg)?,
        Command::Matrix(_) => cmd_matrix(&setup)?,
    };

    let body = match cfg.format.unwrap_or_default() {
        Format::Csv => outcome.csv,
        Format::Json => {
            let doc = json!({
                "schema_version": SCHEMA_VERSION,
                "command": command.name(),
                "config": cfg,
                "result": outcome.result,
                "diagnostics": {
                    "iterations": outcome.iterations,
                    "residual": finite_or_null(outcome.residual),
                    "wall_time_ms": start.elapsed().as_secs_f64() * 1e3,
                },
            });
            let mut s = serde_json::to_string_pretty(&doc).expect("JSON values always serialize");
            s.push('\n');
            s
        }
    };
    match &run.output {
        Some(path) => std::fs::write(path, body).map_err(|e| usage("--output", format!("{}: {e}", path.display()))),
        None => stdout.write_all(body.as_bytes()).map_err(|e| usage("--output", e)),
    }
}

fn flags_config(run: &RunArgs) -> Result<RunConfig, Failure> {
    let mut params = BTreeMap::new();
    for p in &run.params {
        let (name, value) = p.split_once('=').ok_or_else(|| usage("--param", format!("`{p}` is not NAME=VALUE")))?;
        let value: f64 = value.trim().parse().map_err(|_| usage("--param", format!("`{value}` is not a number")))?;
        params.insert(name.trim().to_string(), value);
    }
    Ok(RunConfig {
        map: run.map.clone(),
        params,
        clamp: run.clamp,
        kernel: run.kernel.clone(),
        bins: run.bins,
        piece_width: run.piece_width,
        degree: run.degree,
        tol: run.tol,
        seed: run.seed,
        format: run.format,
        ..Default::default()
    })
}

fn fill_defaults(command: &Command, cfg: &mut RunConfig) -> Result<(), Failure> {
    let memory = matches!(command, Command::Memory(_));
    if memory {
        if cfg.bins.is_some() || cfg.piece_width.is_some() {
            let flag = if cfg.bins.is_some() { "--bins" } else { "--piece-width" };
            return Err(usage(flag, "memory picks the number of states from epsilon (16 per epsilon, at least 64)"));
        }
    } else if cfg.piece_width.is_some() {
        if cfg.bins.is_some() {
            return Err(usage("--bins", "conflicts with --piece-width"));
        }
        cfg.degree.get_or_insert(DEFAULT_DEGREE);
    } else {
        if cfg.degree.is_some() {
            return Err(usage("--degree", "only meaningful with --piece-width"));
        }
        cfg.bins.get_or_insert(DEFAULT_BINS);
    }
    cfg.tol.get_or_insert(if memory { DEFAULT_MEMORY_TOL } else { DEFAULT_TOL });
    cfg.seed.get_or_insert(0);
    cfg.format.get_or_insert(Format::Json);
    match command {
        Command::Invariant(_) => {
            cfg.mc_steps.get_or_insert(0);
            cfg.mix_target.get_or_insert(DEFAULT_MIX_TARGET);
        }
        Command::Ergodic(_) => {
            cfg.threshold.get_or_insert(0.0);
        }
        Command::Power(_) => {
            cfg.bits.get_or_insert(DEFAULT_BITS);
        }
        _ => {}
    }
    Ok(())
}

fn setup(command: &Command, cfg: &RunConfig) -> Result<Setup, Failure> {
    let text = cfg.map.as_deref().ok_or_else(|| usage("--map", "no map given"))?;
    let mut map = MapSpec::parse(text).map_err(|e| usage("--map", e))?;
    map.params.extend(cfg.params.clone());
    map.clamp = cfg.clamp;
    if let MapKind::Expr(e) = &map.kind {
        if let Some(name) = e.parameters().into_iter().find(|p| !map.params.contains_key(p)) {
            return Err(usage("--param", format!("parameter `{name}` of the map is not bound")));
        }
    }
    let bad = map.validate(1000).map_err(|e| usage("--map", e))?;
    if let Some(v) = bad.first() {
        return Err(usage(
            "--map",
            format!("T({}) = {} is outside [0,1] ({} grid points); pass --clamp to clip", v.x, v.value, bad.len()),
        ));
    }
    let ktext = cfg.kernel.as_deref().ok_or_else(|| usage("--kernel", "no kernel given"))?;
    let kernel: NoiseKernel = ktext.parse().map_err(|e| usage("--kernel", e))?;

    let resolution = match (cfg.bins, cfg.piece_width) {
        (Some(n), _) => {
            if n < 2 {
                return Err(usage("--bins", "need at least 2 bins"));
            }
            Resolution::Bins(n)
        }
        (None, Some(w)) => {
            if !(w > 0.0 && w <= 1.0) {
                return Err(usage("--piece-width", "must lie in (0, 1]"));
            }
            Resolution::Pieces { piece_width: w, degree: cfg.degree.unwrap_or(DEFAULT_DEGREE) }
        }
        // memory derives its own resolution
        (None, None) => Resolution::Bins(0),
    };
    let needs_bins = matches!(command, Command::Ergodic(_) | Command::Power(_));
    if needs_bins && matches!(resolution, Resolution::Pieces { .. }) {
        return Err(usage("--piece-width", format!("`{}` needs the Ulam representation (--bins)", command.name())));
    }
    if let (Command::Power(_), Resolution::Bins(n)) = (command, &resolution) {
        if *n > MAX_DENSE_DIM {
            return Err(usage("--bins", format!("power compares against dense squaring; at most {MAX_DENSE_DIM} bins")));
        }
    }
    let tol = cfg.tol.unwrap_or(DEFAULT_TOL);
    if !(tol > 0.0) {
        return Err(usage("--tol", "must be positive"));
    }
    Ok(Setup { map, kernel, resolution, tol, seed: cfg.seed.unwrap_or(0) })
}

fn build(s: &Setup) -> Result<TransferMatrix, Failure> {
    match s.resolution {
        Resolution::Bins(n) => build_ulam(&s.map, &s.kernel, n, DEFAULT_QUAD_ORDER),
        Resolution::Pieces { piece_width, degree } => {
            build_piecewise(&s.map, &s.kernel, piece_width, degree, PiecewiseOptions::default())
        }
    }
    .map_err(|e| match e {
        Error::NotImplemented(_) => usage("--piece-width", e),
        Error::InvalidArgument(_) => usage("--degree", e),
        e => numeric(e),
    })
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn representation_json(rep: Representation) -> Value {
    serde_json::to_value(rep).expect("representation serializes")
}

fn bin_table(masses: &[f64]) -> String {
    let n = masses.len();
    let mut out = String::from("bin_left,bin_right,mass\n");
    for (i, m) in masses.iter().enumerate() {
        let _ = writeln!(out, "{:.15e},{:.15e},{:.15e}", i as f64 / n as f64, (i + 1) as f64 / n as f64, m);
    }
    out
}

fn cmd_invariant(s: &Setup, cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = build(s)?;
    let st = stationary(&p, s.tol, DEFAULT_MAX_ITER).map_err(numeric)?;
    let residual = stationarity_residual(&p, &st.density).map_err(numeric)?;
    let mut warnings = p.metadata.warnings.clone();
    let gap = spectral_gap_detailed(&p, s.tol, GAP_MAX_ITER)
        .map_err(|e| warnings.push(format!("spectral gap: {e}")))
        .ok();
    let mixing = match p.representation {
        Representation::Ulam { .. } => {
            let target = cfg.mix_target.unwrap_or(DEFAULT_MIX_TARGET);
            if !(target > 0.0 && target < 1.0) {
                return Err(usage("--mix-target", "must lie in (0, 1)"));
            }
            match mixing_time(&p, target, gap.as_ref().map(|g| g.gap)) {
                Ok(m) => json!({
                    "target": target,
                    "steps": m.steps,
                    "pair": [m.pair.0, m.pair.1],
                    "gap_estimate": m.gap_estimate.map_or(Value::Null, finite_or_null),
                }),
                Err(e) => {
                    warnings.push(format!("mixing time: {e}"));
                    Value::Null
                }
            }
        }
        Representation::PiecewisePoly { .. } => Value::Null,
    };
    let (grid, density) = match p.representation {
        Representation::Ulam { n_bins } => {
            let masses = st.density.to_grid(n_bins);
            (masses.clone(), json!({ "n_bins": n_bins, "masses": masses }))
        }
        Representation::PiecewisePoly { pieces, degree } => {
            let masses = st.density.to_grid(pieces);
            (
                masses.clone(),
                json!({
                    "pieces": pieces,
                    "degree": degree,
                    "coefficients": st.density.as_slice(),
                    "piece_masses": masses,
                }),
            )
        }
    };
    let steps = cfg.mc_steps.unwrap_or(0);
    let monte_carlo = if steps > 0 {
        let tv = orbit_distance(s, &st.density.to_grid(grid.len().max(64)), steps)?;
        json!({ "steps": steps, "burn_in": MC_BURN_IN, "seed": s.seed, "total_variation": tv })
    } else {
        Value::Null
    };
    let result = json!({
        "representation": representation_json(p.representation),
        "density": density,
        "residual": residual,
        "solver_iterations": st.iterations,
        "gap": gap.as_ref().map_or(Value::Null, |g| json!({
            "gap": g.gap,
            "lambda2": g.lambda2,
            "converged": g.converged,
        })),
        "mixing_time": mixing,
        "monte_carlo": monte_carlo,
        "warnings": warnings,
    });
    Ok(Outcome { result, csv: bin_table(&grid), iterations: st.iterations as u64, residual })
}

/// Total variation between a seeded noisy orbit's histogram and `masses`.
fn orbit_distance(s: &Setup, masses: &[f64], steps: u64) -> Result<f64, Failure> {
    let n = masses.len();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut x: f64 = rng.random();
    let mut hist = vec![0.0; n];
    for t in 0..MC_BURN_IN + steps {
        let y = s.map.eval(x).map_err(numeric)?;
        x = s.kernel.sample(y, &mut rng);
        if t >= MC_BURN_IN {
            hist[((x * n as f64) as usize).min(n - 1)] += 1.0;
        }
    }
    hist.iter_mut().for_each(|h| *h /= steps as f64);
    Ok(total_variation(&hist, masses))
}

fn cmd_memory(s: &Setup, cfg: &RunConfig) -> Result<Outcome, Failure> {
    let eps_list = cfg.eps.clone().unwrap_or_else(|| vec![s.kernel.epsilon]);
    if eps_list.is_empty() {
        return Err(usage("--eps", "need at least one width"));
    }
    for &e in &eps_list {
        NoiseKernel::new(s.kernel.family, e, s.kernel.boundary).map_err(|err| usage("--eps", err))?;
    }
    let rule = ResolutionRule::default();
    let points = memory_table(&s.map, s.kernel.family, s.kernel.boundary, &eps_list, rule, s.tol).map_err(numeric)?;
    let mut result = json!({
        "family": s.kernel.family.to_string(),
        "boundary": s.kernel.boundary.to_string(),
        "resolution_rule": rule,
        "points": points,
    });
    if eps_list.len() >= 4 {
        match check_scaling_eps(&eps_list).and_then(|_| fit_slope(&points)) {
            Ok((slope, intercept)) => {
                result["slope"] = json!(slope);
                result["intercept"] = json!(intercept);
            }
            Err(e) => result["warnings"] = json!([format!("no slope fitted: {e}")]),
        }
    }
    let mut csv = String::from("epsilon,n_states,capacity_bits,certified_slack,iterations\n");
    for p in &points {
        let _ = writeln!(
            csv,
            "{:.15e},{},{:.15e},{:.15e},{}",
            p.epsilon, p.n_states, p.capacity_bits, p.certified_slack, p.iterations
        );
    }
    let iterations = points.iter().map(|p| p.iterations as u64).max().unwrap_or(0);
    let residual = points.iter().map(|p| p.certified_slack).fold(0.0, f64::max);
    Ok(Outcome { result, csv, iterations, residual })
}

/// Maximal runs of consecutive bins as `(first, last)`.
fn runs(states: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &s in states {
        match out.last_mut() {
            Some(r) if r.1 + 1 == s => r.1 = s,
            _ => out.push((s, s)),
        }
    }
    out
}

fn cmd_ergodic(s: &Setup, cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = build(s)?;
    let n = p.dim();
    let threshold = cfg.threshold.unwrap_or(0.0);
    if !(threshold >= 0.0) {
        return Err(usage("--threshold", "must be nonnegative"));
    }
    let dec = ergodic_components(&p, threshold).map_err(numeric)?;
    let h = 1.0 / n as f64;
    let mut csv = String::from("component,bin_left,bin_right,mass\n");
    let mut comps = Vec::new();
    for (k, c) in dec.components.iter().enumerate() {
        let intervals: Vec<[f64; 2]> = runs(&c.states).iter().map(|&(a, b)| [a as f64 * h, (b + 1) as f64 * h]).collect();
        for &i in &c.states {
            let _ = writeln!(csv, "{k},{:.15e},{:.15e},{:.15e}", i as f64 * h, (i + 1) as f64 * h, c.density.masses[i]);
        }
        comps.push(json!({
            "n_states": c.states.len(),
            "intervals": intervals,
            "hull": [c.hull().0, c.hull().1],
            "residual": c.residual,
            "masses": c.density.masses,
        }));
    }
    // smallest number of empty bins between supports of different components
    let mut separation = Value::Null;
    if dec.components.len() > 1 {
        let mut owner = vec![usize::MAX; n];
        for (k, c) in dec.components.iter().enumerate() {
            c.states.iter().for_each(|&i| owner[i] = k);
        }
        let mut best = usize::MAX;
        let mut last: Option<(usize, usize)> = None;
        for (i, &o) in owner.iter().enumerate() {
            if o == usize::MAX {
                continue;
            }
            if let Some((j, k)) = last {
                if k != o {
                    best = best.min(i - j - 1);
                }
            }
            last = Some((i, o));
        }
        if best < usize::MAX {
            separation = json!(best as f64 * h);
        }
    }
    let residual = dec.components.iter().map(|c| c.residual).fold(0.0, f64::max);
    let result = json!({
        "n_bins": n,
        "threshold": dec.threshold,
        "count": dec.components.len(),
        "components": comps,
        "separation": separation,
    });
    Ok(Outcome { result, csv, iterations: 0, residual })
}

fn cmd_gap(s: &Setup) -> Result<Outcome, Failure> {
    let p = build(s)?;
    let g = spectral_gap_detailed(&p, s.tol, GAP_MAX_ITER).map_err(numeric)?;
    let doeblin = doeblin_lower_bound(&s.map, &s.kernel, DOEBLIN_GRID).map_err(numeric)?;
    let eps = s.kernel.epsilon;
    let exp_bound = (-1.0 / (eps * eps)).exp();
    let result = json!({
        "representation": representation_json(p.representation),
        "gap": g.gap,
        "lambda2": g.lambda2,
        "converged": g.converged,
        "spread": g.spread,
        "doeblin_bound": doeblin,
        "doeblin_grid": DOEBLIN_GRID,
        "exp_bound": exp_bound,
        "gap_at_least_doeblin": g.gap >= doeblin,
    });
    let csv = format!("gap,lambda2,doeblin_bound,exp_bound\n{:.15e},{:.15e},{:.15e},{:.15e}\n", g.gap, g.lambda2, doeblin, exp_bound);
    Ok(Outcome { result, csv, iterations: g.iterations as u64, residual: g.spread })
}

fn cmd_power(s: &Setup, cfg: &RunConfig) -> Result<Outcome, Failure> {
    let text = cfg.power.as_deref().ok_or_else(|| usage("--power", "no exponent given"))?;
    let t = parse_power(text).map_err(|e| usage("--power", e))?;
    let bits = cfg.bits.unwrap_or(DEFAULT_BITS);
    if !(1..=50).contains(&bits) {
        return Err(usage("--bits", "must lie in 1..=50"));
    }
    let p = build(s)?;
    let (gamma, source) = match cfg.gamma {
        Some(g) if g > 0.0 && g <= 1.0 => (g, "given"),
        Some(_) => return Err(usage("--gamma", "must lie in (0, 1]")),
        None => (spectral_gap_detailed(&p, s.tol, GAP_MAX_ITER).map_err(numeric)?.gap.min(1.0), "measured"),
    };
    let poly = build_power_polynomial(gamma, &t, bits).map_err(numeric)?;
    let exact = power_by_squaring(&p.matrix, &t).map_err(numeric)?;
    let n = p.dim();
    let mut columns: Vec<usize> = if n <= 128 {
        (0..n).collect()
    } else {
        index::sample(&mut ChaCha8Rng::seed_from_u64(s.seed), n, POWER_COLUMNS).into_vec()
    };
    columns.sort_unstable();
    let mut csv = String::from("column,row,polynomial,squaring,abs_deviation\n");
    let mut deviation: f64 = 0.0;
    for &j in &columns {
        let mut e = vec![0.0; p.dim()];
        e[j] = 1.0;
        let col = apply_power_polynomial(&poly, &p as &dyn MatVec, &e).map_err(numeric)?;
        for (i, v) in col.iter().enumerate() {
            let d = (v - exact[(i, j)]).abs();
            deviation = deviation.max(d);
            let _ = writeln!(csv, "{j},{i},{v:.15e},{:.15e},{d:.15e}", exact[(i, j)]);
        }
    }
    let bound = (2.0f64).powi(-(bits as i32));
    let result = json!({
        "gamma": gamma,
        "gamma_source": source,
        "t": t.to_string(),
        "t_min": t_min(gamma, bits).to_string(),
        "bits": bits,
        "degree": poly.degree,
        "degree_formula": polynomial_degree(gamma, bits),
        "construction": format!("{:?}", poly.construction).to_lowercase(),
        "certified": poly.certified,
        "columns_checked": columns.len(),
        "max_deviation": deviation,
        "bound": bound,
        "within_bound": deviation <= bound,
    });
    Ok(Outcome { result, csv, iterations: poly.degree as u64, residual: deviation })
}

fn cmd_matrix(s: &Setup) -> Result<Outcome, Failure> {
    let p = build(s)?;
    let mut raw = Vec::new();
    p.write_csv(&mut raw).map_err(|e| usage("--output", e))?;
    let rows: Vec<&[f64]> = (0..p.dim()).map(|i| p.matrix.row(i)).collect();
    let result = json!({
        "representation": representation_json(p.representation),
        "dim": p.dim(),
        "stochastic": p.stochastic,
        "max_column_sum_deviation": if p.stochastic { json!(p.max_column_sum_deviation()) } else { Value::Null },
        "metadata": {
            "map": p.metadata.map,
            "kernel": p.metadata.kernel,
            "epsilon": p.metadata.epsilon,
            "quad_order": p.metadata.quad_order,
            "warnings": p.metadata.warnings,
        },
        "rows": rows,
    });
    Ok(Outcome {
        result,
        csv: String::from_utf8(raw).expect("CSV is ASCII"),
        iterations: 0,
        residual: if p.stochastic { p.max_column_sum_deviation() } else { 0.0 },
    })
}
