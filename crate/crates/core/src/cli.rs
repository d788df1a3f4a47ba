//! Command-line surface: `run`, `experiment`, `oracle`, `gen`, `check`.
//!
//! Exit codes: 0 on success, 1 on a validation violation or a missing
//! equilibrium, 2 on usage errors.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::game::{load_game, random_game, save_game, validate_game, Dims, GameError, MarkovGame, Player, QTensor};
use crate::linear::{unflatten, QVector};
use crate::oracle::{enumerate_equilibria, find_reference, EquilibriumCertificate, OracleError, Reference, DEFAULT_BUDGET};
use crate::qvi::{run_qvi, CycleReport};
use crate::report::{analyze, seeded_initial_q, series_csv, trace_csv, AnalysisOptions, EpsMode, ReportError, RunAnalysis};

/// Name of the builtin single-state game.
pub const BUILTIN_GAME: &str = "paper-sec5";
/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SQVI_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "sqvi-out";
/// Iterations skipped before checking that the slack curve is non-increasing.
pub const BURN_IN: usize = 5;

#[derive(Debug, Parser)]
#[command(name = "sqvi", version, about = "Stackelberg Q-value iteration for tabular Markov games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run Q-value iteration per seed and write trace CSVs and a summary.
    Run(RunArgs),
    /// Reproduce the single-state experiment as plot-ready CSVs.
    Experiment(ExperimentArgs),
    /// Enumerate deterministic Stackelberg equilibria.
    Oracle(OracleArgs),
    /// Generate a random game file.
    Gen(GenArgs),
    /// Validate a game file.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Game file, or `paper-sec5` for the builtin game.
    #[arg(long, default_value = BUILTIN_GAME)]
    pub game: String,
    #[arg(long, default_value_t = 60)]
    pub iters: usize,
    /// `a..b` (inclusive), a comma list, or a single seed.
    #[arg(long, default_value = "0..4", value_parser = parse_seeds)]
    pub seeds: std::vec::Vec<u64>,
    /// `uniform`, `zero`, or `file:<path>`.
    #[arg(long, default_value = "uniform", value_parser = parse_init)]
    pub init: InitMode,
    /// `adaptive`, `global`, or `fixed:<x>`.
    #[arg(long, default_value = "global")]
    pub eps: EpsMode,
    /// Leave the equilibrium slacks out of eps_k.
    #[arg(long)]
    pub eps_iterates_only: bool,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: u128,
    #[arg(long, default_value_t = 10)]
    pub cycle_window: usize,
    /// Output directory (defaults to $SQVI_OUT_DIR, then `sqvi-out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, default_value_t = 60)]
    pub iters: usize,
    #[arg(long, default_value = "0..4", value_parser = parse_seeds)]
    pub seeds: std::vec::Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value = BUILTIN_GAME)]
    pub game: String,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: u128,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: u64,
    /// `|S|,|A|,|B|`
    #[arg(long, value_parser = parse_dims)]
    pub dims: Dims,
    #[arg(long)]
    pub gamma: f64,
    /// Destination file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub game: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitMode {
    Uniform,
    Zero,
    File(PathBuf),
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let bad = |x: &str| format!("invalid seed `{x}`");
    let seeds: Vec<u64> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad(lo))?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad(hi))?;
        if hi < lo {
            return Err(format!("empty seed range `{s}`"));
        }
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad(x)))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err("at least one seed is required".into());
    }
    Ok(seeds)
}

pub fn parse_init(s: &str) -> Result<InitMode, String> {
    match s {
        "uniform" => Ok(InitMode::Uniform),
        "zero" => Ok(InitMode::Zero),
        _ => s
            .strip_prefix("file:")
            .map(|p| InitMode::File(PathBuf::from(p)))
            .ok_or_else(|| format!("unknown init mode `{s}` (uniform | zero | file:<path>)")),
    }
}

pub fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("invalid dims `{s}`"))?;
    match parts[..] {
        [ns, na, nb] if ns > 0 && na > 0 && nb > 0 => Ok(Dims::new(ns, na, nb)),
        _ => Err(format!("dims must be three positive integers, got `{s}`")),
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Builtin name or a game file.
pub fn resolve_game(source: &str) -> Result<MarkovGame, CliError> {
    if source == BUILTIN_GAME {
        return Ok(MarkovGame::builtin_example());
    }
    let text = fs::read_to_string(source)
        .map_err(|e| CliError::Usage(format!("cannot read game file `{source}`: {e}")))?;
    Ok(load_game(&text)?)
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Writes through a temporary file in the same directory, then renames.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(contents.as_bytes()).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

#[derive(Deserialize)]
struct InitFile {
    q_leader: Vec<f64>,
    q_follower: Vec<f64>,
}

/// Initial tensors from a JSON file with flat `q_leader` / `q_follower`
/// vectors in the stacked Q-vector layout.
fn load_init(path: &Path, dims: Dims) -> Result<(QTensor, QTensor), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read init file {}: {e}", path.display())))?;
    let file: InitFile = serde_json::from_str(&text).map_err(|e| GameError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let tensor = |values: Vec<f64>, player: Player| -> Result<QTensor, CliError> {
        let v = QVector::new(dims, values).map_err(|e| CliError::Failed(e.to_string()))?;
        let q = unflatten(&v, player);
        q.check(dims)?;
        Ok(q)
    };
    Ok((
        tensor(file.q_leader, Player::Leader)?,
        tensor(file.q_follower, Player::Follower)?,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct ReferenceInfo {
    pub leader_policy: Vec<usize>,
    pub follower_policy: Vec<usize>,
    pub multiplicity: Option<usize>,
    pub source: crate::oracle::ReferenceSource,
    pub max_residual: f64,
}

impl From<&Reference> for ReferenceInfo {
    fn from(r: &Reference) -> Self {
        Self {
            leader_policy: r.certificate.pair.leader.actions().to_vec(),
            follower_policy: r.certificate.pair.follower.actions().to_vec(),
            multiplicity: r.multiplicity,
            source: r.source,
            max_residual: r.certificate.max_residual(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub trace_file: String,
    pub iterations: usize,
    pub converged_at: Option<usize>,
    pub final_err_leader: Option<f64>,
    pub final_err_follower: Option<f64>,
    pub eps_global: f64,
    pub final_eps: f64,
    pub certified_eps: Option<f64>,
    pub cycle: CycleReport,
    pub bounds: Option<crate::report::BoundCheck>,
    pub leader_comparison: Option<crate::comparison::ComparisonSummary>,
    pub follower_comparison: Option<crate::comparison::ComparisonSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub game_hash: String,
    pub dims: Dims,
    pub gamma: f64,
    pub eps_mode: EpsMode,
    pub eps_iterates_only: bool,
    pub reference: Option<ReferenceInfo>,
    pub notes: Vec<String>,
    pub seeds: Vec<SeedSummary>,
}

/// One seed: iterate, analyze, render the CSV.
pub struct SeedRun {
    pub seed: u64,
    pub analysis: RunAnalysis,
    pub converged_at: Option<usize>,
    pub csv: String,
}

pub fn run_seed(
    game: &MarkovGame,
    seed: u64,
    iterations: usize,
    init: &InitMode,
    reference: Option<&Reference>,
    opts: AnalysisOptions,
) -> Result<SeedRun, CliError> {
    let dims = game.dims();
    let (q1, q2) = match init {
        InitMode::Uniform => seeded_initial_q(seed, dims),
        InitMode::Zero => (QTensor::zeros(Player::Leader, dims), QTensor::zeros(Player::Follower, dims)),
        InitMode::File(path) => load_init(path, dims)?,
    };
    let refs = reference.map(|r| (&r.certificate.q1_star, &r.certificate.q2_star));
    let mut trace = run_qvi(game, &q1, &q2, iterations, refs)?;
    trace.meta.seed = Some(seed);
    let analysis = analyze(game, &trace, reference, opts)?;
    let csv = trace_csv(&analysis.rows);
    Ok(SeedRun {
        seed,
        analysis,
        converged_at: trace.meta.converged_at,
        csv,
    })
}

fn seed_summary(run: &SeedRun, iterations: usize, trace_file: String) -> SeedSummary {
    let a = &run.analysis;
    let last = a.rows.last().expect("trace has the initial row");
    SeedSummary {
        seed: run.seed,
        trace_file,
        iterations,
        converged_at: run.converged_at,
        final_err_leader: last.err_leader,
        final_err_follower: last.err_follower,
        eps_global: a.eps_global,
        final_eps: last.eps_k,
        certified_eps: a.certified_eps,
        cycle: a.cycle,
        bounds: a.bounds.clone(),
        leader_comparison: a.leader_comparison.clone(),
        follower_comparison: a.follower_comparison.clone(),
    }
}

fn reference_for(game: &MarkovGame, budget: u128, notes: &mut Vec<String>) -> Result<Option<Reference>, CliError> {
    let reference = find_reference(game, budget)?;
    match &reference {
        None => notes.push("no verified equilibrium: errors, comparison systems and bounds skipped".into()),
        Some(r) if r.multiplicity.unwrap_or(1) > 1 => notes.push(format!(
            "{} verified equilibria; using the lexicographically smallest pair",
            r.multiplicity.unwrap_or(1)
        )),
        _ => {}
    }
    Ok(reference)
}

pub fn cmd_run(args: RunArgs, stdout: &mut dyn Write) -> Result<i32, CliError> {
    let game = resolve_game(&args.game)?;
    let report = validate_game(&game);
    if !report.is_valid() {
        for v in &report.violations {
            let _ = writeln!(stdout, "violation: {v}");
        }
        return Ok(1);
    }
    let dir = out_dir(args.out);
    let mut notes = Vec::new();
    let reference = reference_for(&game, args.budget, &mut notes)?;
    let opts = AnalysisOptions {
        eps_mode: args.eps,
        iterates_only: args.eps_iterates_only,
        cycle_window: args.cycle_window,
    };
    let runs: Vec<SeedRun> = args
        .seeds
        .par_iter()
        .map(|&seed| run_seed(&game, seed, args.iters, &args.init, reference.as_ref(), opts))
        .collect::<Result<_, _>>()?;
    let mut seeds = Vec::with_capacity(runs.len());
    for run in &runs {
        let name = format!("seed_{}.csv", run.seed);
        write_atomic(&dir.join(&name), &run.csv)?;
        seeds.push(seed_summary(run, args.iters, name));
    }
    let summary = RunSummary {
        game_hash: game.content_hash(),
        dims: game.dims(),
        gamma: game.gamma(),
        eps_mode: args.eps,
        eps_iterates_only: args.eps_iterates_only,
        reference: reference.as_ref().map(ReferenceInfo::from),
        notes,
        seeds,
    };
    let text = to_json(&summary);
    write_atomic(&dir.join("summary.json"), &text)?;
    let _ = stdout.write_all(text.as_bytes());
    Ok(0)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentChecks {
    pub eps_global: f64,
    pub late_eps: f64,
    /// Max-seed slack curve non-increasing for `k >= BURN_IN`.
    pub eps_nonincreasing_after_burn_in: bool,
    pub errors_below_bounds: bool,
    pub errors_below_adaptive_bounds: bool,
    /// Every bound curve stays strictly positive.
    pub bounds_non_vanishing: bool,
    pub asymptote_global: f64,
    pub asymptote_adaptive: f64,
}

/// Figure datasets of the experiment, before writing.
pub struct ExperimentData {
    pub runs: Vec<SeedRun>,
    pub reference: Reference,
    pub fig1: String,
    pub fig2: String,
    pub fig3: String,
    pub checks: ExperimentChecks,
}

fn max_mean(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut max, mut sum, mut n) = (f64::NEG_INFINITY, 0.0, 0usize);
    for v in values {
        max = max.max(v);
        sum += v;
        n += 1;
    }
    (max, sum / n as f64)
}

pub fn experiment_data(iterations: usize, seeds: &[u64]) -> Result<ExperimentData, CliError> {
    let game = MarkovGame::builtin_example();
    let gamma = game.gamma();
    let reference = find_reference(&game, DEFAULT_BUDGET)?
        .ok_or_else(|| CliError::Failed("builtin game has no verified equilibrium".into()))?;
    let opts = AnalysisOptions::default();
    let runs: Vec<SeedRun> = seeds
        .par_iter()
        .map(|&seed| run_seed(&game, seed, iterations, &InitMode::Uniform, Some(&reference), opts))
        .collect::<Result<_, _>>()?;

    let eps_curve: Vec<(f64, f64)> = (0..=iterations)
        .map(|k| max_mean(runs.iter().map(|r| r.analysis.rows[k].eps_k)))
        .collect();
    let eps_global = eps_curve.iter().fold(0.0, |m: f64, e| m.max(e.0));
    let bound = |k: usize, eps: f64| crate::comparison::theorem_bound(k, gamma, eps).expect("valid gamma");

    let fig1_rows: Vec<(usize, Vec<f64>)> = eps_curve
        .iter()
        .enumerate()
        .map(|(k, &(max, mean))| (k, vec![max, mean, eps_global]))
        .collect();
    let fig1 = series_csv(&["eps_max", "eps_mean", "eps_global"], &fig1_rows);

    let mut all_below = true;
    let mut all_below_adaptive = true;
    let mut min_bound = f64::INFINITY;
    let mut error_fig = |err: fn(&crate::report::TraceRow) -> Option<f64>| {
        let rows: Vec<(usize, Vec<f64>)> = (0..=iterations)
            .map(|k| {
                let (emax, emean) = max_mean(runs.iter().map(|r| err(&r.analysis.rows[k]).unwrap_or(f64::NAN)));
                let (eps_max, eps_mean) = eps_curve[k];
                let global = bound(k, eps_global);
                let (adaptive_max, adaptive_mean) = (bound(k, eps_max), bound(k, eps_mean));
                all_below &= emax <= global;
                all_below_adaptive &= runs
                    .iter()
                    .all(|r| err(&r.analysis.rows[k]).unwrap_or(f64::NAN) <= bound(k, r.analysis.rows[k].eps_k));
                min_bound = min_bound.min(global).min(adaptive_max).min(adaptive_mean);
                (k, vec![emax, emean, global, adaptive_max, adaptive_mean])
            })
            .collect();
        series_csv(&["err_max", "err_mean", "bound_global", "bound_adaptive_max", "bound_adaptive_mean"], &rows)
    };
    let fig2 = error_fig(|r| r.err_leader);
    let fig3 = error_fig(|r| r.err_follower);

    let late_eps = eps_curve.last().map(|e| e.0).unwrap_or(0.0);
    let checks = ExperimentChecks {
        eps_global,
        late_eps,
        eps_nonincreasing_after_burn_in: eps_curve
            .iter()
            .skip(BURN_IN)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[1].0 <= w[0].0),
        errors_below_bounds: all_below,
        errors_below_adaptive_bounds: all_below_adaptive,
        bounds_non_vanishing: min_bound > 0.0,
        asymptote_global: 3.0 * eps_global / (1.0 - gamma),
        asymptote_adaptive: 3.0 * late_eps / (1.0 - gamma),
    };
    Ok(ExperimentData {
        runs,
        reference,
        fig1,
        fig2,
        fig3,
        checks,
    })
}

pub fn cmd_experiment(args: ExperimentArgs, stdout: &mut dyn Write) -> Result<i32, CliError> {
    let dir = out_dir(args.out);
    let data = experiment_data(args.iters, &args.seeds)?;
    let mut seeds = Vec::new();
    for run in &data.runs {
        let name = format!("seed_{}.csv", run.seed);
        write_atomic(&dir.join(&name), &run.csv)?;
        seeds.push(seed_summary(run, args.iters, name));
    }
    write_atomic(&dir.join("fig1_epsilon.csv"), &data.fig1)?;
    write_atomic(&dir.join("fig2_leader_error.csv"), &data.fig2)?;
    write_atomic(&dir.join("fig3_follower_error.csv"), &data.fig3)?;
    let summary = json!({
        "game": BUILTIN_GAME,
        "iterations": args.iters,
        "reference": ReferenceInfo::from(&data.reference),
        "checks": data.checks,
        "seeds": seeds,
    });
    let text = to_json(&summary);
    write_atomic(&dir.join("summary.json"), &text)?;
    let _ = stdout.write_all(text.as_bytes());
    Ok(0)
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub game_hash: String,
    pub candidates: u128,
    pub multiplicity: usize,
    pub certificates: Vec<EquilibriumCertificate>,
}

pub fn cmd_oracle(args: OracleArgs, stdout: &mut dyn Write) -> Result<i32, CliError> {
    let game = resolve_game(&args.game)?;
    let certificates = enumerate_equilibria(&game, args.budget)?;
    let report = OracleReport {
        game_hash: game.content_hash(),
        candidates: crate::oracle::candidate_count(&game),
        multiplicity: certificates.len(),
        certificates,
    };
    let text = to_json(&report);
    if let Some(path) = &args.out {
        write_atomic(path, &text)?;
    }
    let _ = stdout.write_all(text.as_bytes());
    Ok(if report.certificates.is_empty() { 1 } else { 0 })
}

pub fn cmd_gen(args: GenArgs, stdout: &mut dyn Write) -> Result<i32, CliError> {
    if !(0.0..1.0).contains(&args.gamma) {
        return Err(CliError::Usage(format!("gamma must lie in [0, 1), got {}", args.gamma)));
    }
    let text = save_game(&random_game(args.seed, args.dims, args.gamma));
    match &args.out {
        Some(path) => write_atomic(path, &text)?,
        None => {
            let _ = stdout.write_all(text.as_bytes());
        }
    }
    Ok(0)
}

pub fn cmd_check(args: CheckArgs, stdout: &mut dyn Write) -> Result<i32, CliError> {
    let game = match resolve_game(&args.game) {
        Ok(g) => g,
        Err(CliError::Game(e)) => {
            let _ = writeln!(stdout, "invalid: {e}");
            return Ok(1);
        }
        Err(e) => return Err(e),
    };
    let report = validate_game(&game);
    if report.is_valid() {
        let _ = writeln!(stdout, "valid: {} game, gamma {}", game.dims(), game.gamma());
        Ok(0)
    } else {
        for v in &report.violations {
            let _ = writeln!(stdout, "violation: {v}");
        }
        Ok(1)
    }
}

/// Runs a parsed command; the returned code is the process exit status.
pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(args, stdout),
        Command::Experiment(args) => cmd_experiment(args, stdout),
        Command::Oracle(args) => cmd_oracle(args, stdout),
        Command::Gen(args) => cmd_gen(args, stdout),
        Command::Check(args) => cmd_check(args, stdout),
    }
}
