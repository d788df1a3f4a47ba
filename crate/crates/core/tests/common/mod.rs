//! Test-only oracles, independent of the library's fast paths.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use sqvi::game::{random_game, Dims, MarkovGame, Player, QTensor};
use sqvi::oracle::{evaluate_policy_pair, verify_equilibrium};
use sqvi::qvi::{FollowerPolicy, LeaderPolicy, PolicyPair};

/// Mixed-radix decoding, least significant digit first.
pub fn digits(mut index: usize, radix: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let d = index % radix;
            index /= radix;
            d
        })
        .collect()
}

/// Every deterministic pair of a game.
pub fn all_pairs(dims: Dims) -> Vec<PolicyPair> {
    let (ns, na, nb) = (dims.states, dims.leader_actions, dims.follower_actions);
    let leaders = na.pow(ns as u32);
    let followers = nb.pow((ns * na) as u32);
    let mut out = Vec::with_capacity(leaders * followers);
    for l in 0..leaders {
        for f in 0..followers {
            out.push(PolicyPair::new(
                LeaderPolicy::new(digits(l, na, ns)),
                FollowerPolicy::new(na, digits(f, nb, ns * na)),
            ));
        }
    }
    out
}

/// Exhaustive enumeration: evaluate and verify every pair.
pub fn naive_equilibria(game: &MarkovGame) -> Vec<PolicyPair> {
    let mut found: Vec<PolicyPair> = all_pairs(game.dims())
        .into_iter()
        .filter(|pair| {
            let (q1, q2) = evaluate_policy_pair(game, pair).unwrap();
            verify_equilibrium(game, pair, &q1, &q2).verified()
        })
        .collect();
    found.sort();
    found
}

/// `(I - gamma * P_pi) V = r_pi` by LU, then `Q = r + gamma * P V`.
pub fn direct_solve(game: &MarkovGame, pair: &PolicyPair, player: Player) -> QTensor {
    let d = game.dims();
    let n = d.states;
    let gamma = game.gamma();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        let (la, fb) = (pair.leader.action(s), pair.on_path_follower(s));
        r[s] = game.reward(player, s, la, fb);
        for t in 0..n {
            a[(s, t)] -= gamma * game.transition(s, la, fb, t);
        }
    }
    let v = a.lu().solve(&r).expect("I - gamma P is nonsingular");
    let mut q = QTensor::zeros(player, d);
    for (s, la, fb) in d.triples() {
        let next: f64 = (0..n).map(|t| game.transition(s, la, fb, t) * v[t]).sum();
        q.set(s, la, fb, game.reward(player, s, la, fb) + gamma * next);
    }
    q
}

/// Checks the four relaxed best-response inequalities for every
/// deterministic deviation `mu1: S -> A`, `mu2: S -> B`.
pub fn relaxed_best_response_holds(
    q1: &QTensor,
    q2: &QTensor,
    pair: &PolicyPair,
    star: (&QTensor, &QTensor, &PolicyPair),
    eps: f64,
) -> bool {
    let d = q1.dims();
    let (ns, na, nb) = (d.states, d.leader_actions, d.follower_actions);
    let (q1s, q2s, sp) = star;
    let tol = 1e-12;
    for m in 0..nb.pow(ns as u32) {
        let mu2 = digits(m, nb, ns);
        for (s, &b) in mu2.iter().enumerate() {
            let a = pair.leader.action(s);
            if q1.get(s, a, pair.on_path_follower(s)) > q1.get(s, a, b) + eps + tol {
                return false;
            }
            let a = sp.leader.action(s);
            if q1s.get(s, a, sp.on_path_follower(s)) > q1s.get(s, a, b) + eps + tol {
                return false;
            }
        }
    }
    for m in 0..na.pow(ns as u32) {
        let mu1 = digits(m, na, ns);
        for (s, &a) in mu1.iter().enumerate() {
            let b = pair.on_path_follower(s);
            if q2.get(s, pair.leader.action(s), b) > q2.get(s, a, b) + eps + tol {
                return false;
            }
            let b = sp.on_path_follower(s);
            if q2s.get(s, sp.leader.action(s), b) > q2s.get(s, a, b) + eps + tol {
                return false;
            }
        }
    }
    true
}

/// The random corpus: `|S| <= 5`, `|A|, |B| <= 4`, gamma in {0.5, 0.8, 0.95}.
pub fn corpus_game(index: u64) -> MarkovGame {
    let ns = 1 + (index % 5) as usize;
    let na = 1 + ((index / 5) % 4) as usize;
    let nb = 1 + ((index / 20) % 4) as usize;
    let gamma = [0.5, 0.8, 0.95][(index % 3) as usize];
    random_game(10_000 + index, Dims::new(ns, na, nb), gamma)
}

/// Deterministic initial tensors with sup-norm at most 1.
pub fn corpus_init(index: u64, dims: Dims) -> (QTensor, QTensor) {
    sqvi::report::seeded_initial_q(500_000 + index, dims)
}
