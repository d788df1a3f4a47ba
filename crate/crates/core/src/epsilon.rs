//! Slack of the relaxed best-response condition.
//!
//! For a greedy pair `(a, b)` and tensors `(Q1, Q2)` the condition asks, for
//! every state and every deterministic deviation, that
//!
//! ```text
//! Q1(s, a(s), b(s, a(s))) <= Q1(s, a(s), mu2(s)) + eps
//! Q2(s, a(s), b(s, a(s))) <= Q2(s, mu1(s), b(s, a(s))) + eps
//! ```
//!
//! States decouple, so the worst deviation is a per-state min over one
//! action; the smallest admissible `eps` is the max over states of the gap.

use serde::Serialize;
use thiserror::Error;

use crate::game::QTensor;
use crate::qvi::PolicyPair;

#[derive(Debug, Error, PartialEq)]
#[error("discount factor {0} outside [0, 1)")]
pub struct GammaError(pub f64);

pub(crate) fn check_gamma(gamma: f64) -> Result<(), GammaError> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(GammaError(gamma))
    }
}

/// `max_s [ Q1(s, a(s), b(s, a(s))) - min_b Q1(s, a(s), b) ]`.
pub fn slack_leader(q1: &QTensor, pair: &PolicyPair) -> f64 {
    let d = q1.dims();
    (0..d.states)
        .map(|s| {
            let a = pair.leader.action(s);
            let row = q1.row(s, a);
            let worst = row.iter().copied().fold(f64::INFINITY, f64::min);
            row[pair.follower.action(s, a)] - worst
        })
        .fold(0.0, f64::max)
}

/// With `bbar(s) = b(s, a(s))` fixed:
/// `max_s [ Q2(s, a(s), bbar(s)) - min_a Q2(s, a, bbar(s)) ]`.
pub fn slack_follower(q2: &QTensor, pair: &PolicyPair) -> f64 {
    let d = q2.dims();
    (0..d.states)
        .map(|s| {
            let bbar = pair.on_path_follower(s);
            let worst = (0..d.leader_actions)
                .map(|a| q2.get(s, a, bbar))
                .fold(f64::INFINITY, f64::min);
            q2.get(s, pair.leader.action(s), bbar) - worst
        })
        .fold(0.0, f64::max)
}

/// Slacks of the equilibrium tensors; constant over a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StarSlacks {
    pub leader: f64,
    pub follower: f64,
}

impl StarSlacks {
    pub fn new(q1_star: &QTensor, q2_star: &QTensor, star: &PolicyPair) -> Self {
        Self {
            leader: slack_leader(q1_star, star),
            follower: slack_follower(q2_star, star),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpsilonRecord {
    pub slack_leader_k: f64,
    pub slack_follower_k: f64,
    pub slack_leader_star: f64,
    pub slack_follower_star: f64,
    /// Max of all four slacks.
    pub eps_k: f64,
}

impl EpsilonRecord {
    pub fn new(iterate: (f64, f64), star: StarSlacks) -> Self {
        let (leader_k, follower_k) = iterate;
        Self {
            slack_leader_k: leader_k,
            slack_follower_k: follower_k,
            slack_leader_star: star.leader,
            slack_follower_star: star.follower,
            eps_k: leader_k.max(follower_k).max(star.leader).max(star.follower),
        }
    }

    /// Variant ignoring the equilibrium terms.
    pub fn iterates_only(&self) -> f64 {
        self.slack_leader_k.max(self.slack_follower_k)
    }

    /// Slack needed by the leader's comparison systems.
    pub fn leader_terms(&self) -> f64 {
        self.slack_leader_k.max(self.slack_leader_star)
    }

    /// Slack needed by the follower's comparison systems.
    pub fn follower_terms(&self) -> f64 {
        self.slack_follower_k.max(self.slack_follower_star)
    }
}

/// Per-iteration slack. `pair_k` must be the greedy pair of `(q1_k, q2_k)`.
pub fn epsilon_k(q1_k: &QTensor, q2_k: &QTensor, pair_k: &PolicyPair, star: StarSlacks) -> EpsilonRecord {
    EpsilonRecord::new(
        (slack_leader(q1_k, pair_k), slack_follower(q2_k, pair_k)),
        star,
    )
}

/// `2 / (1 - gamma)`: every slack of tensors bounded by `1 / (1 - gamma)`
/// stays below this.
pub fn epsilon_existence_bound(gamma: f64) -> Result<f64, GammaError> {
    check_gamma(gamma)?;
    Ok(2.0 / (1.0 - gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{Dims, MarkovGame, Player};
    use crate::qvi::{greedy_pair, FollowerPolicy, LeaderPolicy};

    fn builtin_star() -> (QTensor, QTensor, PolicyPair) {
        let g = MarkovGame::builtin_example();
        let shift = |p: Player| {
            let r = QTensor::rewards_of(&g, p);
            let c = 0.8 * r.get(0, 1, 0) / 0.2;
            QTensor::from_values(p, g.dims(), r.values().iter().map(|v| v + c).collect()).unwrap()
        };
        let pair = PolicyPair::new(LeaderPolicy::new(vec![1]), FollowerPolicy::new(2, vec![1, 0]));
        (shift(Player::Leader), shift(Player::Follower), pair)
    }

    #[test]
    fn builtin_star_slacks() {
        let (q1, q2, pair) = builtin_star();
        assert!((q1.get(0, 1, 0) - 2.5).abs() < 1e-12);
        assert_eq!(slack_leader(&q1, &pair), 0.0);
        // Q2*(s,2,1) = 4.0 against min(3.5, 4.0)
        assert!((slack_follower(&q2, &pair) - 0.5).abs() < 1e-12);
        let star = StarSlacks::new(&q1, &q2, &pair);
        let rec = epsilon_k(&q1, &q2, &pair, star);
        assert!((rec.eps_k - 0.5).abs() < 1e-12);
        assert!((rec.iterates_only() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_tensors_have_zero_slack() {
        let dims = Dims::new(3, 3, 2);
        let q = QTensor::from_values(Player::Leader, dims, vec![1.25; dims.len()]).unwrap();
        let pair = greedy_pair(&q, &q);
        assert_eq!(slack_leader(&q, &pair), 0.0);
        assert_eq!(slack_follower(&q, &pair), 0.0);
    }

    #[test]
    fn constructed_leader_gap() {
        let dims = Dims::new(1, 1, 2);
        let q = QTensor::from_values(Player::Leader, dims, vec![1.0, 0.4]).unwrap();
        let pair = PolicyPair::new(LeaderPolicy::new(vec![0]), FollowerPolicy::new(1, vec![0]));
        assert!((slack_leader(&q, &pair) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn follower_indifferent_column() {
        let dims = Dims::new(1, 3, 2);
        let q2 = QTensor::from_values(Player::Follower, dims, vec![0.7, 0.1, 0.7, 0.9, 0.7, 0.2])
            .unwrap();
        let pair = PolicyPair::new(LeaderPolicy::new(vec![0]), FollowerPolicy::new(3, vec![0, 1, 0]));
        assert_eq!(slack_follower(&q2, &pair), 0.0);
    }

    #[test]
    fn existence_bound_values() {
        assert_eq!(epsilon_existence_bound(0.8).unwrap(), 2.0 / (1.0 - 0.8));
        assert!((epsilon_existence_bound(0.8).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(epsilon_existence_bound(0.0).unwrap(), 2.0);
        assert!((epsilon_existence_bound(0.99).unwrap() - 200.0).abs() < 1e-9);
        assert_eq!(epsilon_existence_bound(1.0), Err(GammaError(1.0)));
        assert!(epsilon_existence_bound(-0.1).is_err());
    }
}
