//! Per-run analysis: slacks, comparison systems and bounds joined into one
//! row per iteration, plus CSV and JSON export.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::comparison::{run_comparison, theorem_bound, BoundError, ComparisonError, ComparisonSummary};
use crate::epsilon::{epsilon_existence_bound, epsilon_k, EpsilonRecord, GammaError, StarSlacks};
use crate::game::{format_real, Dims, MarkovGame, Player, QTensor};
use crate::oracle::Reference;
use crate::qvi::{detect_cycle, CycleReport, IterationTrace};

/// Header of the per-seed trace CSV.
pub const TRACE_COLUMNS: [&str; 14] = [
    "k",
    "err_leader",
    "err_follower",
    "eps_k",
    "bound_eps_k",
    "bound_eps_global",
    "norm_q1",
    "norm_q2",
    "leader_policy",
    "follower_policy",
    "bound_theorem_global",
    "bound_theorem_adaptive",
    "sandwich_violation_upper",
    "sandwich_violation_lower",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Gamma(#[from] GammaError),
}

/// Which `eps` certifies the comparison systems and the main bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum EpsMode {
    /// `eps_global`, with the per-iteration curve as the headline diagnostic.
    Adaptive,
    /// `eps_global = max_k eps_k`.
    Global,
    Fixed(f64),
}

impl FromStr for EpsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(EpsMode::Adaptive),
            "global" => Ok(EpsMode::Global),
            _ => {
                let value = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| format!("unknown eps mode `{s}` (adaptive | global | fixed:<x>)"))?;
                let x: f64 = value
                    .parse()
                    .map_err(|_| format!("invalid fixed eps `{value}`"))?;
                if x.is_finite() && x >= 0.0 {
                    Ok(EpsMode::Fixed(x))
                } else {
                    Err(format!("fixed eps must be finite and >= 0, got {x}"))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalysisOptions {
    pub eps_mode: EpsMode,
    /// Drop the equilibrium slacks from `eps_k`.
    pub iterates_only: bool,
    /// Window for cycle detection.
    pub cycle_window: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            eps_mode: EpsMode::Global,
            iterates_only: false,
            cycle_window: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub err_leader: Option<f64>,
    pub err_follower: Option<f64>,
    pub eps_k: f64,
    /// `2 / (1 - gamma)`, the a-priori cap on `eps_k`.
    pub bound_eps_k: f64,
    /// `max_k eps_k` over the run.
    pub bound_eps_global: f64,
    pub norm_q1: f64,
    pub norm_q2: f64,
    pub leader_policy: String,
    pub follower_policy: String,
    pub bound_theorem_global: Option<f64>,
    /// Non-certified diagnostic using `eps_k` in place of a constant.
    pub bound_theorem_adaptive: Option<f64>,
    pub sandwich_violation_upper: Option<f64>,
    pub sandwich_violation_lower: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    /// Error within the certified bound at every `k`.
    pub leader_within_bound: bool,
    pub follower_within_bound: bool,
    /// Error within the adaptive (`eps_k`) curve at every `k`.
    pub leader_within_adaptive: bool,
    pub follower_within_adaptive: bool,
    /// Bound value at `k -> infinity`.
    pub asymptote: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunAnalysis {
    pub rows: Vec<TraceRow>,
    pub eps: Vec<EpsilonRecord>,
    pub eps_global: f64,
    /// The constant `eps` used for comparison systems and the main bound.
    pub certified_eps: Option<f64>,
    pub leader_comparison: Option<ComparisonSummary>,
    pub follower_comparison: Option<ComparisonSummary>,
    pub bounds: Option<BoundCheck>,
    pub cycle: CycleReport,
}

/// Joins a trace with its slacks, comparison systems and bounds. Without a
/// reference only the slacks of the iterates are available.
pub fn analyze(
    game: &MarkovGame,
    trace: &IterationTrace,
    reference: Option<&Reference>,
    opts: AnalysisOptions,
) -> Result<RunAnalysis, ReportError> {
    let gamma = game.gamma();
    let eps_cap = epsilon_existence_bound(gamma)?;
    let cert = reference.map(|r| &r.certificate);
    let star = match cert {
        Some(c) if !opts.iterates_only => StarSlacks::new(&c.q1_star, &c.q2_star, &c.pair),
        _ => StarSlacks {
            leader: 0.0,
            follower: 0.0,
        },
    };
    let eps: Vec<EpsilonRecord> = trace
        .records
        .iter()
        .map(|r| epsilon_k(&r.q_leader, &r.q_follower, &r.pair, star))
        .collect();
    let eps_global = eps.iter().fold(0.0, |m: f64, e| m.max(e.eps_k));

    let certified_eps = cert.map(|_| match opts.eps_mode {
        EpsMode::Adaptive | EpsMode::Global => eps_global,
        EpsMode::Fixed(x) => x,
    });

    let (leader_cmp, follower_cmp) = match (cert, certified_eps) {
        (Some(c), Some(e)) => (
            Some(run_comparison(game, trace, &c.q1_star, &c.pair, e)?),
            Some(run_comparison(game, trace, &c.q2_star, &c.pair, e)?),
        ),
        _ => (None, None),
    };

    let mut rows = Vec::with_capacity(trace.len());
    for (i, rec) in trace.records.iter().enumerate() {
        let (leader_policy, follower_policy) = rec.pair.compact();
        let global = certified_eps.map(|e| theorem_bound(rec.k, gamma, e)).transpose()?;
        let adaptive = cert
            .map(|_| theorem_bound(rec.k, gamma, eps[i].eps_k))
            .transpose()?;
        rows.push(TraceRow {
            k: rec.k,
            err_leader: rec.err_leader,
            err_follower: rec.err_follower,
            eps_k: eps[i].eps_k,
            bound_eps_k: eps_cap,
            bound_eps_global: eps_global,
            norm_q1: rec.norm_leader,
            norm_q2: rec.norm_follower,
            leader_policy,
            follower_policy,
            bound_theorem_global: global,
            bound_theorem_adaptive: adaptive,
            sandwich_violation_upper: leader_cmp.as_ref().map(|c| c.records[i].violation_upper),
            sandwich_violation_lower: leader_cmp.as_ref().map(|c| c.records[i].violation_lower),
        });
    }

    let bounds = certified_eps.map(|e| {
        let within = |err: fn(&TraceRow) -> Option<f64>, bound: fn(&TraceRow) -> Option<f64>| {
            rows.iter().all(|r| match (err(r), bound(r)) {
                (Some(x), Some(b)) => x <= b,
                _ => false,
            })
        };
        BoundCheck {
            leader_within_bound: within(|r| r.err_leader, |r| r.bound_theorem_global),
            follower_within_bound: within(|r| r.err_follower, |r| r.bound_theorem_global),
            leader_within_adaptive: within(|r| r.err_leader, |r| r.bound_theorem_adaptive),
            follower_within_adaptive: within(|r| r.err_follower, |r| r.bound_theorem_adaptive),
            asymptote: 3.0 * e / (1.0 - gamma),
        }
    });

    Ok(RunAnalysis {
        rows,
        eps,
        eps_global,
        certified_eps,
        leader_comparison: leader_cmp.map(|c| c.summary()),
        follower_comparison: follower_cmp.map(|c| c.summary()),
        bounds,
        cycle: detect_cycle(trace, opts.cycle_window),
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(format_real).unwrap_or_default()
}

/// CSV with a header row; absent values are empty fields.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = TRACE_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let fields = [
            r.k.to_string(),
            opt(r.err_leader),
            opt(r.err_follower),
            format_real(r.eps_k),
            format_real(r.bound_eps_k),
            format_real(r.bound_eps_global),
            format_real(r.norm_q1),
            format_real(r.norm_q2),
            r.leader_policy.clone(),
            r.follower_policy.clone(),
            opt(r.bound_theorem_global),
            opt(r.bound_theorem_adaptive),
            opt(r.sandwich_violation_upper),
            opt(r.sandwich_violation_lower),
        ];
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

/// Generic numeric CSV: `k` followed by one column per series.
pub fn series_csv(columns: &[&str], rows: &[(usize, Vec<f64>)]) -> String {
    let mut out = String::from("k");
    for c in columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (k, values) in rows {
        out.push_str(&k.to_string());
        for v in values {
            out.push(',');
            out.push_str(&format_real(*v));
        }
        out.push('\n');
    }
    out
}

fn uniform_symmetric(rng: &mut ChaCha8Rng) -> f64 {
    // 53 random bits -> [0, 1) -> [-1, 1)
    let unit = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * unit - 1.0
}

/// Seeded initial tensors with entries uniform on `[-1, 1)`.
///
/// ChaCha8 keyed by `seed` (expanded with `seed_from_u64`); stream 0 fills the
/// leader tensor and stream 1 the follower tensor, both in `(s, a, b)`
/// row-major order, each entry from the top 53 bits of one 64-bit output.
pub fn seeded_initial_q(seed: u64, dims: Dims) -> (QTensor, QTensor) {
    let draw = |stream: u64, player: Player| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let values = (0..dims.len()).map(|_| uniform_symmetric(&mut rng)).collect();
        QTensor::from_values(player, dims, values).expect("shape matches")
    };
    (draw(0, Player::Leader), draw(1, Player::Follower))
}
