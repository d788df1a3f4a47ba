//! Upper and lower comparison systems and the finite-time error bound.
//!
//! For the leader, with `D = Q - Q1*` and the greedy pair `(a_k, b_k)` of the
//! main iteration:
//!
//! ```text
//! D^U_{k+1} = gamma * P * M_{[a_k, b*]} * D^U_k + gamma * eps * 1
//! D^L_{k+1} = gamma * P * M_{[a*, b_k]} * D^L_k - gamma * eps * 1
//! ```
//!
//! where the follower policy inside `M` is composed with the leader policy of
//! the same subscript: `M_{[a_k, b*]}` selects `(s, a_k(s), b*(s, a_k(s)))`.
//! Started from `Q^U_0 = Q^L_0 = Q_0` and with `eps` no smaller than the
//! leader slacks of every iterate and of the equilibrium, the two systems
//! sandwich the true iterates.
//!
//! The follower mirror swaps the roles of the two policies:
//! `M_{[a*, b_k(., a_k)]}` for the upper system and
//! `M_{[a_k, b*(., a*)]}` for the lower one, needing `eps` no smaller than
//! the follower slacks.

use serde::Serialize;
use thiserror::Error;

use crate::epsilon::{check_gamma, GammaError};
use crate::game::{MarkovGame, Player, QTensor};
use crate::linear::{build_transition_matrix, flatten, propagate, unflatten, QVector, SelectionMatrix, TransitionMatrix};
use crate::qvi::{FollowerPolicy, IterationTrace, LeaderPolicy, PolicyPair};

#[derive(Debug, Error, PartialEq)]
pub enum ComparisonError {
    #[error("iteration trace is empty")]
    EmptyTrace,
    #[error("reference tensor or equilibrium pair does not match the game")]
    ShapeMismatch,
    #[error("eps must be finite and non-negative, got {0}")]
    InvalidEps(f64),
    #[error(transparent)]
    Gamma(#[from] GammaError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonState {
    pub q_upper: QTensor,
    pub q_lower: QTensor,
    pub eps: f64,
    /// `Q1*` for the leader systems, `Q2*` for the follower mirror.
    pub reference: QTensor,
    pub star_pair: PolicyPair,
}

impl ComparisonState {
    /// Both systems start at `q0`.
    pub fn new(q0: &QTensor, reference: QTensor, star_pair: PolicyPair, eps: f64) -> Self {
        Self {
            q_upper: q0.clone(),
            q_lower: q0.clone(),
            eps,
            reference,
            star_pair,
        }
    }
}

/// `Q' = Q* + gamma * P * M * (Q - Q*) + offset * 1`.
fn switched_step(
    gamma: f64,
    p: &TransitionMatrix,
    m: &SelectionMatrix,
    current: &QTensor,
    reference: &QTensor,
    offset: f64,
) -> QTensor {
    let star = flatten(reference);
    let diff: Vec<f64> = flatten(current)
        .values()
        .iter()
        .zip(star.values())
        .map(|(q, r)| q - r)
        .collect();
    let values = propagate(gamma, p, m, &diff)
        .into_iter()
        .zip(star.values())
        .map(|(x, r)| r + x + offset)
        .collect();
    let v = QVector::new(current.dims(), values).expect("shape preserved");
    unflatten(&v, current.player())
}

/// Selections driving the upper and lower systems at step `k`.
fn selections(
    player: Player,
    dims: crate::game::Dims,
    star: &PolicyPair,
    pair_k: &PolicyPair,
) -> (SelectionMatrix, SelectionMatrix) {
    match player {
        Player::Leader => (
            SelectionMatrix::from_leader_and_map(dims, &pair_k.leader, &star.follower.compose(&pair_k.leader)),
            SelectionMatrix::from_leader_and_map(dims, &star.leader, &pair_k.follower.compose(&star.leader)),
        ),
        Player::Follower => (
            SelectionMatrix::from_leader_and_map(dims, &star.leader, &pair_k.follower.compose(&pair_k.leader)),
            SelectionMatrix::from_leader_and_map(dims, &pair_k.leader, &star.follower.compose(&star.leader)),
        ),
    }
}

/// Leader upper system: one step driven by the main iteration's leader policy.
pub fn upper_step(game: &MarkovGame, cs: &ComparisonState, leader_k: &LeaderPolicy) -> QTensor {
    let dims = game.dims();
    let m = SelectionMatrix::from_leader_and_map(dims, leader_k, &cs.star_pair.follower.compose(leader_k));
    let p = build_transition_matrix(game);
    let gamma = game.gamma();
    switched_step(gamma, &p, &m, &cs.q_upper, &cs.reference, gamma * cs.eps)
}

/// Leader lower system: one step driven by the main iteration's follower
/// policy.
pub fn lower_step(game: &MarkovGame, cs: &ComparisonState, follower_k: &FollowerPolicy) -> QTensor {
    let dims = game.dims();
    let star_leader = &cs.star_pair.leader;
    let m = SelectionMatrix::from_leader_and_map(dims, star_leader, &follower_k.compose(star_leader));
    let p = build_transition_matrix(game);
    let gamma = game.gamma();
    switched_step(gamma, &p, &m, &cs.q_lower, &cs.reference, -gamma * cs.eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRecord {
    pub k: usize,
    pub q_upper: QTensor,
    pub q_lower: QTensor,
    /// `max(0, max(Q_k - Q^U_k))`.
    pub violation_upper: f64,
    /// `max(0, max(Q^L_k - Q_k))`.
    pub violation_lower: f64,
    /// `||Q^U_k - Q*||_inf`.
    pub err_upper: f64,
    /// `||Q^L_k - Q*||_inf`.
    pub err_lower: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonSummary {
    pub player: Player,
    pub eps: f64,
    pub max_violation_upper: f64,
    pub max_violation_lower: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTrace {
    pub player: Player,
    pub eps: f64,
    pub records: Vec<ComparisonRecord>,
}

impl ComparisonTrace {
    pub fn summary(&self) -> ComparisonSummary {
        ComparisonSummary {
            player: self.player,
            eps: self.eps,
            max_violation_upper: self.records.iter().fold(0.0, |m, r| m.max(r.violation_upper)),
            max_violation_lower: self.records.iter().fold(0.0, |m, r| m.max(r.violation_lower)),
        }
    }
}

fn excess(lhs: &QTensor, rhs: &QTensor) -> f64 {
    lhs.values()
        .iter()
        .zip(rhs.values())
        .fold(0.0, |m: f64, (x, y)| m.max(x - y))
}

/// Runs both comparison systems alongside `main`, using the greedy pair of
/// record `k` to advance from `k` to `k + 1`. `reference.player()` selects the
/// leader systems or the follower mirror.
pub fn run_comparison(
    game: &MarkovGame,
    main: &IterationTrace,
    reference: &QTensor,
    star: &PolicyPair,
    eps: f64,
) -> Result<ComparisonTrace, ComparisonError> {
    let gamma = game.gamma();
    check_gamma(gamma)?;
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(ComparisonError::InvalidEps(eps));
    }
    let dims = game.dims();
    if reference.dims() != dims || !star.fits(dims) {
        return Err(ComparisonError::ShapeMismatch);
    }
    let player = reference.player();
    let actual = |k: usize| match player {
        Player::Leader => &main.records[k].q_leader,
        Player::Follower => &main.records[k].q_follower,
    };
    let first = main.records.first().ok_or(ComparisonError::EmptyTrace)?;
    if first.q_leader.dims() != dims {
        return Err(ComparisonError::ShapeMismatch);
    }

    let p = build_transition_matrix(game);
    let mut upper = actual(0).clone();
    let mut lower = actual(0).clone();
    let mut records = Vec::with_capacity(main.len());
    for (k, rec) in main.records.iter().enumerate() {
        let q = actual(k);
        records.push(ComparisonRecord {
            k,
            violation_upper: excess(q, &upper),
            violation_lower: excess(&lower, q),
            err_upper: upper.sup_distance(reference),
            err_lower: lower.sup_distance(reference),
            q_upper: upper.clone(),
            q_lower: lower.clone(),
        });
        if k + 1 < main.len() {
            let (m_upper, m_lower) = selections(player, dims, star, &rec.pair);
            upper = switched_step(gamma, &p, &m_upper, &upper, reference, gamma * eps);
            lower = switched_step(gamma, &p, &m_lower, &lower, reference, -gamma * eps);
        }
    }
    Ok(ComparisonTrace {
        player,
        eps,
        records,
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error(transparent)]
    Gamma(#[from] GammaError),
    #[error("eps must be finite and non-negative, got {0}")]
    InvalidEps(f64),
}

fn check_bound_args(gamma: f64, eps: f64) -> Result<(), BoundError> {
    check_gamma(gamma)?;
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(BoundError::InvalidEps(eps));
    }
    Ok(())
}

fn gamma_pow(gamma: f64, k: usize) -> f64 {
    gamma.powi(k.min(i32::MAX as usize) as i32)
}

/// `(6 / (1 - gamma)) * gamma^k + 3 * eps / (1 - gamma)`.
pub fn theorem_bound(k: usize, gamma: f64, eps: f64) -> Result<f64, BoundError> {
    check_bound_args(gamma, eps)?;
    Ok(6.0 / (1.0 - gamma) * gamma_pow(gamma, k) + 3.0 * eps / (1.0 - gamma))
}

/// Per-system bound `(2 / (1 - gamma)) * gamma^k + eps / (1 - gamma)` on
/// `||Q^U_k - Q*||` and `||Q^L_k - Q*||`.
pub fn upper_bound_norm(k: usize, gamma: f64, eps: f64) -> Result<f64, BoundError> {
    check_bound_args(gamma, eps)?;
    Ok(2.0 / (1.0 - gamma) * gamma_pow(gamma, k) + eps / (1.0 - gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::Dims;
    use crate::oracle::closed_form_single_state;
    use crate::qvi::run_qvi;

    fn builtin() -> (MarkovGame, QTensor, QTensor, PolicyPair) {
        let g = MarkovGame::builtin_example();
        let (q1, q2, pair) = closed_form_single_state(&g).unwrap();
        (g, q1, q2, pair)
    }

    #[test]
    fn upper_step_from_reference_adds_affine_term() {
        let (g, q1, _, star) = builtin();
        let cs = ComparisonState::new(&q1, q1.clone(), star.clone(), 0.5);
        let next = upper_step(&g, &cs, &LeaderPolicy::new(vec![0]));
        for (x, r) in next.values().iter().zip(q1.values()) {
            assert!((x - (r + 0.8 * 0.5)).abs() < 1e-15);
        }
        let next = lower_step(&g, &cs, &FollowerPolicy::new(2, vec![0, 1]));
        for (x, r) in next.values().iter().zip(q1.values()) {
            assert!((x - (r - 0.8 * 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_eps_contracts_by_gamma_on_single_state() {
        let (g, q1, _, star) = builtin();
        let start = QTensor::from_values(Player::Leader, g.dims(), vec![0.0, 1.0, -1.0, 0.5]).unwrap();
        let cs = ComparisonState::new(&start, q1.clone(), star.clone(), 0.0);
        let next = upper_step(&g, &cs, &star.leader);
        // the selected entry (s, 2, 1) carries the whole difference forward
        let selected = start.get(0, 1, 0) - q1.get(0, 1, 0);
        for (x, r) in next.values().iter().zip(q1.values()) {
            assert!((x - r - 0.8 * selected).abs() < 1e-12);
        }
        assert!(next.sup_distance(&q1) <= 0.8 * start.sup_distance(&q1) + 1e-12);
    }

    #[test]
    fn zero_eps_lower_system_rests_at_reference() {
        let (g, q1, _, star) = builtin();
        let mut cs = ComparisonState::new(&q1, q1.clone(), star.clone(), 0.0);
        for _ in 0..5 {
            cs.q_lower = lower_step(&g, &cs, &FollowerPolicy::new(2, vec![0, 0]));
        }
        assert!(cs.q_lower.sup_distance(&q1) < 1e-12);
    }

    #[test]
    fn builtin_run_is_sandwiched() {
        let (g, q1s, q2s, star) = builtin();
        let q1 = QTensor::from_values(Player::Leader, g.dims(), vec![-0.9, 0.7, 0.2, -0.3]).unwrap();
        let q2 = QTensor::from_values(Player::Follower, g.dims(), vec![0.5, -0.5, 0.9, 0.1]).unwrap();
        let trace = run_qvi(&g, &q1, &q2, 40, Some((&q1s, &q2s))).unwrap();
        for reference in [&q1s, &q2s] {
            let cmp = run_comparison(&g, &trace, reference, &star, 10.0).unwrap();
            assert_eq!(cmp.records.len(), 41);
            let summary = cmp.summary();
            assert_eq!(summary.max_violation_upper, 0.0);
            assert_eq!(summary.max_violation_lower, 0.0);
        }
    }

    #[test]
    fn zero_iterations_give_trivial_trace() {
        let (g, q1s, q2s, star) = builtin();
        let trace = run_qvi(&g, &q1s, &q2s, 0, None).unwrap();
        let cmp = run_comparison(&g, &trace, &q1s, &star, 0.5).unwrap();
        assert_eq!(cmp.records.len(), 1);
        assert_eq!(cmp.records[0].violation_upper, 0.0);
        assert_eq!(cmp.records[0].violation_lower, 0.0);
    }

    #[test]
    fn comparison_rejects_bad_inputs() {
        let (g, q1s, q2s, star) = builtin();
        let trace = run_qvi(&g, &q1s, &q2s, 1, None).unwrap();
        assert_eq!(
            run_comparison(&g, &trace, &q1s, &star, -1.0).unwrap_err(),
            ComparisonError::InvalidEps(-1.0)
        );
        let other = QTensor::zeros(Player::Leader, Dims::new(2, 2, 2));
        assert_eq!(
            run_comparison(&g, &trace, &other, &star, 0.1).unwrap_err(),
            ComparisonError::ShapeMismatch
        );
    }

    #[test]
    fn theorem_bound_values() {
        assert!((theorem_bound(0, 0.8, 0.5).unwrap() - 37.5).abs() < 1e-12);
        assert!((theorem_bound(10_000, 0.8, 0.5).unwrap() - 7.5).abs() < 1e-12);
        let expected = 30.0 * 0.8f64.powi(10);
        assert!((theorem_bound(10, 0.8, 0.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 3.221_225_472).abs() < 1e-9);
        assert!(theorem_bound(0, 1.0, 0.0).is_err());
        assert!(matches!(
            theorem_bound(0, 0.5, f64::NAN),
            Err(BoundError::InvalidEps(_))
        ));
    }

    #[test]
    fn per_system_bound_values() {
        assert!((upper_bound_norm(0, 0.8, 0.5).unwrap() - 12.5).abs() < 1e-12);
        for k in 0..20 {
            let per = upper_bound_norm(k, 0.8, 0.3).unwrap();
            // 2 * lower + upper with equal per-system bounds
            assert!((theorem_bound(k, 0.8, 0.3).unwrap() - 3.0 * per).abs() < 1e-12);
        }
        assert_eq!(upper_bound_norm(1, 0.0, 0.25).unwrap(), 0.25);
        assert_eq!(upper_bound_norm(0, 0.0, 0.25).unwrap(), 2.25);
    }
}
