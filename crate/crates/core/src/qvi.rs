//! Stackelberg Q-value iteration with deterministic greedy policies.
//!
//! One step computes the follower's best response `b_k(s, a)` and the
//! leader's greedy action `a_k(s)` from the current tensors, then updates both
//! Q-functions simultaneously against the continuation value
//! `Q(s', a_k(s'), b_k(s', a_k(s')))`. Every argmax breaks ties toward the
//! lowest index.

use std::fmt;

use serde::Serialize;

use crate::game::{Dims, GameError, MarkovGame, Player, QTensor};

/// A run counts as numerically converged once successive iterates differ by
/// less than this in sup-norm. Reporting only.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-10;

/// Deterministic leader policy `S -> A`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct LeaderPolicy(Vec<usize>);

impl LeaderPolicy {
    pub fn new(actions: Vec<usize>) -> Self {
        Self(actions)
    }

    #[inline]
    pub fn action(&self, s: usize) -> usize {
        self.0[s]
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    pub fn num_states(&self) -> usize {
        self.0.len()
    }
}

/// Deterministic follower policy `S x A -> B`, stored row-major by state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct FollowerPolicy {
    leader_actions: usize,
    actions: Vec<usize>,
}

impl FollowerPolicy {
    pub fn new(leader_actions: usize, actions: Vec<usize>) -> Self {
        assert!(leader_actions > 0 && actions.len().is_multiple_of(leader_actions));
        Self {
            leader_actions,
            actions,
        }
    }

    /// The follower's response to leader action `a` in state `s`.
    #[inline]
    pub fn action(&self, s: usize, a: usize) -> usize {
        self.actions[s * self.leader_actions + a]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn leader_actions(&self) -> usize {
        self.leader_actions
    }

    pub fn num_states(&self) -> usize {
        self.actions.len() / self.leader_actions
    }

    /// The `S -> B` map obtained by plugging in a leader policy.
    pub fn compose(&self, leader: &LeaderPolicy) -> Vec<usize> {
        (0..self.num_states())
            .map(|s| self.action(s, leader.action(s)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PolicyPair {
    pub leader: LeaderPolicy,
    pub follower: FollowerPolicy,
}

impl PolicyPair {
    pub fn new(leader: LeaderPolicy, follower: FollowerPolicy) -> Self {
        Self { leader, follower }
    }

    /// Dimension and range check against a game shape.
    pub fn fits(&self, dims: Dims) -> bool {
        self.leader.num_states() == dims.states
            && self.follower.leader_actions() == dims.leader_actions
            && self.follower.num_states() == dims.states
            && self.leader.actions().iter().all(|&a| a < dims.leader_actions)
            && self
                .follower
                .actions()
                .iter()
                .all(|&b| b < dims.follower_actions)
    }

    /// Follower action on the equilibrium path, `b(s, a(s))`.
    #[inline]
    pub fn on_path_follower(&self, s: usize) -> usize {
        self.follower.action(s, self.leader.action(s))
    }

    /// Compact `leader/follower` digit strings, e.g. `1/10` for a single
    /// state where the leader plays 1 and the follower answers 1 to 0 and 0
    /// to 1. States are separated by `|` within the follower string.
    pub fn compact(&self) -> (String, String) {
        let leader = digits(self.leader.actions());
        let follower = self
            .follower
            .actions()
            .chunks(self.follower.leader_actions())
            .map(digits)
            .collect::<Vec<_>>()
            .join("|");
        (leader, follower)
    }
}

fn digits(xs: &[usize]) -> String {
    if xs.iter().all(|&x| x < 10) {
        xs.iter().map(|x| char::from(b'0' + *x as u8)).collect()
    } else {
        xs.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(".")
    }
}

impl fmt::Display for PolicyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (l, fo) = self.compact();
        write!(f, "{l}/{fo}")
    }
}

/// Index of the first maximum.
#[inline]
pub(crate) fn argmax_first(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if i == 0 || v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Follower best response: for every `(s, a)`, the smallest `b` attaining
/// `max_b Q2(s, a, b)`.
pub fn follower_greedy(q2: &QTensor) -> FollowerPolicy {
    let d = q2.dims();
    let mut actions = Vec::with_capacity(d.states * d.leader_actions);
    for s in 0..d.states {
        for a in 0..d.leader_actions {
            actions.push(argmax_first(q2.row(s, a).iter().copied()));
        }
    }
    FollowerPolicy::new(d.leader_actions, actions)
}

/// Leader greedy action anticipating the follower: for every `s`, the
/// smallest `a` attaining `max_a Q1(s, a, bp(s, a))`.
pub fn leader_greedy(q1: &QTensor, follower: &FollowerPolicy) -> LeaderPolicy {
    let d = q1.dims();
    let actions = (0..d.states)
        .map(|s| argmax_first((0..d.leader_actions).map(|a| q1.get(s, a, follower.action(s, a)))))
        .collect();
    LeaderPolicy::new(actions)
}

/// The greedy pair `(a_k, b_k)` induced by the current tensors.
pub fn greedy_pair(q1: &QTensor, q2: &QTensor) -> PolicyPair {
    let follower = follower_greedy(q2);
    let leader = leader_greedy(q1, &follower);
    PolicyPair::new(leader, follower)
}

/// `r(s,a,b) + gamma * sum_{s'} P(s'|s,a,b) * next_value[s']` for every
/// triple, summing over `s'` in ascending order.
pub(crate) fn bellman_backup(game: &MarkovGame, player: Player, next_value: &[f64]) -> QTensor {
    let d = game.dims();
    let gamma = game.gamma();
    let rewards = game.rewards(player);
    let values = d
        .triples()
        .enumerate()
        .map(|(i, (s, a, b))| {
            let expected: f64 = game
                .transition_row(s, a, b)
                .iter()
                .zip(next_value)
                .map(|(p, v)| p * v)
                .sum();
            rewards[i] + gamma * expected
        })
        .collect();
    QTensor::from_values(player, d, values).expect("backup preserves shape")
}

/// `Q(s, a(s), b(s, a(s)))` for every state.
pub(crate) fn on_path_values(q: &QTensor, pair: &PolicyPair) -> Vec<f64> {
    (0..q.dims().states)
        .map(|s| q.get(s, pair.leader.action(s), pair.on_path_follower(s)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub q_leader: QTensor,
    pub q_follower: QTensor,
    /// The greedy pair of the input tensors, used for both updates.
    pub pair: PolicyPair,
}

/// One simultaneous Stackelberg Q-value iteration step.
pub fn qvi_step(game: &MarkovGame, q1: &QTensor, q2: &QTensor) -> Result<StepOutput, GameError> {
    q1.check(game.dims())?;
    q2.check(game.dims())?;
    let pair = greedy_pair(q1, q2);
    let q_leader = bellman_backup(game, Player::Leader, &on_path_values(q1, &pair));
    let q_follower = bellman_backup(game, Player::Follower, &on_path_values(q2, &pair));
    Ok(StepOutput {
        q_leader,
        q_follower,
        pair,
    })
}

/// State of iteration `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub q_leader: QTensor,
    pub q_follower: QTensor,
    /// Greedy pair of `(Q1_k, Q2_k)`; the pair driving the step `k -> k+1`.
    pub pair: PolicyPair,
    pub norm_leader: f64,
    pub norm_follower: f64,
    /// `||Q^i_k - Q^i_*||_inf` when references were supplied.
    pub err_leader: Option<f64>,
    pub err_follower: Option<f64>,
    /// `max_i ||Q^i_k - Q^i_{k-1}||_inf`, absent at `k = 0`.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceMeta {
    pub game_hash: String,
    pub seed: Option<u64>,
    pub iterations: usize,
    /// First `k` with `delta < CONVERGENCE_TOLERANCE`.
    pub converged_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    pub meta: TraceMeta,
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("trace holds the initial record")
    }

    pub fn pairs(&self) -> impl Iterator<Item = &PolicyPair> {
        self.records.iter().map(|r| &r.pair)
    }
}

/// Runs `iterations` steps from `(q1_0, q2_0)` and records every iterate,
/// including `k = 0`. With `refs = Some((Q1*, Q2*))` sup-norm errors are
/// recorded too.
pub fn run_qvi(
    game: &MarkovGame,
    q1_0: &QTensor,
    q2_0: &QTensor,
    iterations: usize,
    refs: Option<(&QTensor, &QTensor)>,
) -> Result<IterationTrace, GameError> {
    q1_0.check(game.dims())?;
    q2_0.check(game.dims())?;
    if let Some((r1, r2)) = refs {
        r1.check(game.dims())?;
        r2.check(game.dims())?;
    }
    let record = |k: usize, q1: QTensor, q2: QTensor, delta: Option<f64>| {
        let pair = greedy_pair(&q1, &q2);
        IterationRecord {
            k,
            norm_leader: q1.sup_norm(),
            norm_follower: q2.sup_norm(),
            err_leader: refs.map(|(r1, _)| q1.sup_distance(r1)),
            err_follower: refs.map(|(_, r2)| q2.sup_distance(r2)),
            q_leader: q1,
            q_follower: q2,
            pair,
            delta,
        }
    };
    let mut records = Vec::with_capacity(iterations + 1);
    records.push(record(0, q1_0.clone(), q2_0.clone(), None));
    let mut converged_at = None;
    for k in 1..=iterations {
        let prev = records.last().expect("non-empty");
        let step = qvi_step(game, &prev.q_leader, &prev.q_follower)?;
        let delta = step
            .q_leader
            .sup_distance(&prev.q_leader)
            .max(step.q_follower.sup_distance(&prev.q_follower));
        if converged_at.is_none() && delta < CONVERGENCE_TOLERANCE {
            converged_at = Some(k);
        }
        records.push(record(k, step.q_leader, step.q_follower, Some(delta)));
    }
    Ok(IterationTrace {
        meta: TraceMeta {
            game_hash: game.content_hash(),
            seed: None,
            iterations,
            converged_at,
        },
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "period", rename_all = "lowercase")]
pub enum CycleReport {
    /// The greedy pair is constant over the inspected suffix.
    None,
    Periodic(usize),
    Aperiodic,
}

/// Looks for the smallest period `p <= window` of the greedy policy sequence
/// over the last `2 * window` records (or all records if fewer).
pub fn detect_cycle(trace: &IterationTrace, window: usize) -> CycleReport {
    let pairs: Vec<&PolicyPair> = trace.pairs().collect();
    detect_period(&pairs, window)
}

pub(crate) fn detect_period<T: PartialEq>(seq: &[T], window: usize) -> CycleReport {
    let take = (2 * window).min(seq.len());
    let suffix = &seq[seq.len() - take..];
    if suffix.windows(2).all(|w| w[0] == w[1]) {
        return CycleReport::None;
    }
    (2..=window.min(take.saturating_sub(1)))
        .find(|&p| (0..take - p).all(|k| suffix[k] == suffix[k + p]))
        .map_or(CycleReport::Aperiodic, CycleReport::Periodic)
}
