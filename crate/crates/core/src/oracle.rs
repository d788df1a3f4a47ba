//! Equilibrium references computed independently of the main iteration.
//!
//! A pair `(a*, b*)` is a Stackelberg equilibrium when its own Q-functions
//! `Q^i = r^i + gamma * P * M_{[a*, b*]} * Q^i` satisfy
//! `b*(s, a) in argmax_b Q2(s, a, b)` for every `(s, a)` and
//! `a*(s) in argmax_a Q1(s, a, b*(s, a))` for every `s`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::epsilon::{check_gamma, GammaError};
use crate::game::{MarkovGame, Player, QTensor, ROW_SUM_TOLERANCE};
use crate::linear::flatten;
use crate::qvi::{bellman_backup, greedy_pair, on_path_values, run_qvi, FollowerPolicy, LeaderPolicy, PolicyPair};

/// Policy evaluation stops once its a-posteriori error bound
/// `gamma / (1 - gamma) * ||V_{n+1} - V_n||` is at most this.
pub const EVALUATION_TOLERANCE: f64 = 1e-12;
/// A certificate is verified when every residual is at most this.
pub const VERIFY_TOLERANCE: f64 = 1e-8;
/// Default cap on the number of deterministic pairs enumerated.
pub const DEFAULT_BUDGET: u128 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("enumeration needs {required} candidate pairs, budget is {limit}")]
    BudgetExceeded { required: u128, limit: u128 },
    #[error("policy pair does not fit the game dimensions")]
    PairMismatch,
    #[error("closed form needs a single state, game has {0}")]
    NotSingleState(usize),
    #[error("closed form needs a self-loop transition")]
    NotSelfLoop,
    #[error("policy evaluation did not converge within {0} sweeps")]
    NonConvergence(usize),
    #[error(transparent)]
    Gamma(#[from] GammaError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquilibriumCertificate {
    pub pair: PolicyPair,
    #[serde(serialize_with = "serialize_flat")]
    pub q1_star: QTensor,
    #[serde(serialize_with = "serialize_flat")]
    pub q2_star: QTensor,
    /// `max_{s,a} [max_b Q2(s,a,b) - Q2(s,a,b*(s,a))]`
    pub follower_residual: f64,
    /// `max_s [max_a Q1(s,a,b*(s,a)) - Q1(s,a*(s),b*(s,a*(s)))]`
    pub leader_residual: f64,
    /// Max violation of the policy-evaluation fixed-point equations.
    pub evaluation_residual: f64,
}

fn serialize_flat<S: serde::Serializer>(q: &QTensor, ser: S) -> Result<S::Ok, S::Error> {
    flatten(q).values().serialize(ser)
}

impl EquilibriumCertificate {
    pub fn verified(&self) -> bool {
        self.follower_residual <= VERIFY_TOLERANCE
            && self.leader_residual <= VERIFY_TOLERANCE
            && self.evaluation_residual <= VERIFY_TOLERANCE
    }

    pub fn max_residual(&self) -> f64 {
        self.follower_residual
            .max(self.leader_residual)
            .max(self.evaluation_residual)
    }
}

fn max_sweeps(gamma: f64) -> usize {
    if gamma == 0.0 {
        2
    } else {
        ((10.0 * EVALUATION_TOLERANCE.ln() / gamma.ln()).ceil() as usize).max(2)
    }
}

/// Fixed-point iteration on the on-path values `V(s) = Q(s, a(s), b(s, a(s)))`.
/// Returns the converged values and the sweep-to-sweep sup differences.
pub(crate) fn evaluate_on_path(
    game: &MarkovGame,
    pair: &PolicyPair,
    player: Player,
) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
    let d = game.dims();
    let gamma = game.gamma();
    let path: Vec<(usize, usize)> = (0..d.states)
        .map(|s| (pair.leader.action(s), pair.on_path_follower(s)))
        .collect();
    let mut value = vec![0.0; d.states];
    let mut diffs = Vec::new();
    let cap = max_sweeps(gamma);
    let gain = if gamma == 0.0 { 0.0 } else { gamma / (1.0 - gamma) };
    for _ in 0..cap {
        let next: Vec<f64> = path
            .iter()
            .enumerate()
            .map(|(s, &(a, b))| {
                let expected: f64 = game
                    .transition_row(s, a, b)
                    .iter()
                    .zip(&value)
                    .map(|(p, v)| p * v)
                    .sum();
                game.reward(player, s, a, b) + gamma * expected
            })
            .collect();
        let diff = next
            .iter()
            .zip(&value)
            .fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()));
        value = next;
        diffs.push(diff);
        // below a few ulps the sweeps only shuffle round-off
        let floor = 8.0 * f64::EPSILON * value.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        if gain * diff <= EVALUATION_TOLERANCE || diff <= floor {
            return Ok((value, diffs));
        }
    }
    Err(OracleError::NonConvergence(cap))
}

/// Q-functions of both players under a fixed deterministic pair.
pub fn evaluate_policy_pair(
    game: &MarkovGame,
    pair: &PolicyPair,
) -> Result<(QTensor, QTensor), OracleError> {
    check_gamma(game.gamma())?;
    if !pair.fits(game.dims()) {
        return Err(OracleError::PairMismatch);
    }
    let (v1, _) = evaluate_on_path(game, pair, Player::Leader)?;
    let (v2, _) = evaluate_on_path(game, pair, Player::Follower)?;
    Ok((
        bellman_backup(game, Player::Leader, &v1),
        bellman_backup(game, Player::Follower, &v2),
    ))
}

fn evaluation_residual(game: &MarkovGame, pair: &PolicyPair, q: &QTensor) -> f64 {
    bellman_backup(game, q.player(), &on_path_values(q, pair)).sup_distance(q)
}

/// Residuals of the equilibrium conditions for `pair` against its tensors.
pub fn verify_equilibrium(
    game: &MarkovGame,
    pair: &PolicyPair,
    q1: &QTensor,
    q2: &QTensor,
) -> EquilibriumCertificate {
    let d = game.dims();
    let mut follower_residual: f64 = 0.0;
    let mut leader_residual: f64 = 0.0;
    for s in 0..d.states {
        for a in 0..d.leader_actions {
            let row = q2.row(s, a);
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            follower_residual = follower_residual.max(best - row[pair.follower.action(s, a)]);
        }
        let best = (0..d.leader_actions)
            .map(|a| q1.get(s, a, pair.follower.action(s, a)))
            .fold(f64::NEG_INFINITY, f64::max);
        let chosen = q1.get(s, pair.leader.action(s), pair.on_path_follower(s));
        leader_residual = leader_residual.max(best - chosen);
    }
    let evaluation_residual =
        evaluation_residual(game, pair, q1).max(evaluation_residual(game, pair, q2));
    EquilibriumCertificate {
        pair: pair.clone(),
        q1_star: q1.clone(),
        q2_star: q2.clone(),
        follower_residual,
        leader_residual,
        evaluation_residual,
    }
}

/// Number of deterministic pairs, `|A|^|S| * |B|^(|S||A|)`, saturating.
pub fn candidate_count(game: &MarkovGame) -> u128 {
    let d = game.dims();
    let pow = |base: usize, exp: usize| -> Option<u128> {
        (base as u128).checked_pow(u32::try_from(exp).ok()?)
    };
    pow(d.leader_actions, d.states)
        .zip(pow(d.follower_actions, d.states * d.leader_actions))
        .and_then(|(x, y)| x.checked_mul(y))
        .unwrap_or(u128::MAX)
}

/// Decodes `index` into mixed-radix digits (least significant first).
fn digits_of(mut index: usize, radix: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let digit = index % radix;
            index /= radix;
            digit
        })
        .collect()
}

/// Every verified deterministic equilibrium, sorted by pair.
///
/// The Q-functions of a pair depend only on its on-path actions
/// `(a(s), b(s, a(s)))`, so the search runs over those and fills in the
/// off-path follower responses from the near-argmax sets of `Q2`. The result
/// equals exhaustive evaluation of all `|A|^|S| * |B|^(|S||A|)` pairs, and
/// that count is what `limit` bounds.
pub fn enumerate_equilibria(
    game: &MarkovGame,
    limit: u128,
) -> Result<Vec<EquilibriumCertificate>, OracleError> {
    check_gamma(game.gamma())?;
    let required = candidate_count(game);
    if required > limit {
        return Err(OracleError::BudgetExceeded { required, limit });
    }
    let d = game.dims();
    let (ns, na, nb) = (d.states, d.leader_actions, d.follower_actions);
    let path_count = na.pow(ns as u32) * nb.pow(ns as u32);
    let batches: Result<Vec<Vec<EquilibriumCertificate>>, OracleError> = (0..path_count)
        .into_par_iter()
        .map(|index| {
            let leader = digits_of(index % na.pow(ns as u32), na, ns);
            let on_path = digits_of(index / na.pow(ns as u32), nb, ns);
            search_on_path(game, leader, on_path)
        })
        .collect();
    let mut found: Vec<EquilibriumCertificate> = batches?.into_iter().flatten().collect();
    found.sort_by(|x, y| x.pair.cmp(&y.pair));
    Ok(found)
}

fn search_on_path(
    game: &MarkovGame,
    leader: Vec<usize>,
    on_path: Vec<usize>,
) -> Result<Vec<EquilibriumCertificate>, OracleError> {
    let d = game.dims();
    let (ns, na) = (d.states, d.leader_actions);
    // Off-path entries are placeholders until the tensors are known.
    let mut follower = vec![0; ns * na];
    for s in 0..ns {
        follower[s * na + leader[s]] = on_path[s];
    }
    let probe = PolicyPair::new(
        LeaderPolicy::new(leader.clone()),
        FollowerPolicy::new(na, follower.clone()),
    );
    let (q1, q2) = evaluate_policy_pair(game, &probe)?;

    // Near-argmax follower responses per (s, a); on-path entries are fixed.
    let mut options: Vec<Vec<usize>> = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let row = q2.row(s, a);
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let admissible: Vec<usize> = (0..row.len())
                .filter(|&b| best - row[b] <= VERIFY_TOLERANCE)
                .collect();
            if a == leader[s] {
                if !admissible.contains(&on_path[s]) {
                    return Ok(Vec::new());
                }
                options.push(vec![on_path[s]]);
            } else {
                options.push(admissible);
            }
        }
    }

    let combos: usize = options.iter().map(Vec::len).product();
    let mut found = Vec::new();
    for combo in 0..combos {
        let mut rest = combo;
        for (slot, choices) in options.iter().enumerate() {
            follower[slot] = choices[rest % choices.len()];
            rest /= choices.len();
        }
        let pair = PolicyPair::new(
            LeaderPolicy::new(leader.clone()),
            FollowerPolicy::new(na, follower.clone()),
        );
        let cert = verify_equilibrium(game, &pair, &q1, &q2);
        if cert.verified() {
            found.push(cert);
        }
    }
    Ok(found)
}

/// Closed-form Q-functions of a single-state self-loop game.
///
/// With one state every Q-function is the reward plus a constant, so the
/// equilibrium pair is greedy on the rewards and
/// `Q^i(s,a,b) = r^i(s,a,b) + gamma * r^i(s,a*,b*) / (1 - gamma)`.
pub fn closed_form_single_state(
    game: &MarkovGame,
) -> Result<(QTensor, QTensor, PolicyPair), OracleError> {
    let gamma = game.gamma();
    check_gamma(gamma)?;
    let d = game.dims();
    if d.states != 1 {
        return Err(OracleError::NotSingleState(d.states));
    }
    if d
        .triples()
        .any(|(s, a, b)| (game.transition(s, a, b, 0) - 1.0).abs() > ROW_SUM_TOLERANCE)
    {
        return Err(OracleError::NotSelfLoop);
    }
    let r1 = QTensor::rewards_of(game, Player::Leader);
    let r2 = QTensor::rewards_of(game, Player::Follower);
    let pair = greedy_pair(&r1, &r2);
    let (a, b) = (pair.leader.action(0), pair.on_path_follower(0));
    let close = |r: QTensor| {
        let shift = gamma * r.get(0, a, b) / (1.0 - gamma);
        let values = r.values().iter().map(|v| v + shift).collect();
        QTensor::from_values(r.player(), d, values).expect("same shape")
    };
    Ok((close(r1), close(r2), pair))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    Enumeration,
    ConvergedIteration,
}

/// An equilibrium chosen as the error reference for a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reference {
    pub certificate: EquilibriumCertificate,
    /// Number of verified equilibria, known only after enumeration.
    pub multiplicity: Option<usize>,
    pub source: ReferenceSource,
}

/// Picks a reference equilibrium: the lexicographically smallest verified
/// pair when enumeration fits in `budget`; otherwise the greedy pair of a
/// long zero-initialized run, kept only if it verifies.
pub fn find_reference(game: &MarkovGame, budget: u128) -> Result<Option<Reference>, OracleError> {
    match enumerate_equilibria(game, budget) {
        Ok(found) => {
            let multiplicity = found.len();
            Ok(found.into_iter().next().map(|certificate| Reference {
                certificate,
                multiplicity: Some(multiplicity),
                source: ReferenceSource::Enumeration,
            }))
        }
        Err(OracleError::BudgetExceeded { .. }) => {
            let d = game.dims();
            let sweeps = max_sweeps(game.gamma()).max(200);
            let trace = run_qvi(
                game,
                &QTensor::zeros(Player::Leader, d),
                &QTensor::zeros(Player::Follower, d),
                sweeps,
                None,
            )
            .expect("zero tensors fit the game");
            let pair = trace.last().pair.clone();
            let (q1, q2) = evaluate_policy_pair(game, &pair)?;
            let certificate = verify_equilibrium(game, &pair, &q1, &q2);
            Ok(certificate.verified().then_some(Reference {
                certificate,
                multiplicity: None,
                source: ReferenceSource::ConvergedIteration,
            }))
        }
        Err(e) => Err(e),
    }
}
