//! Matrix form of the Q-value iteration.
//!
//! The Q-vector stacks blocks `Q_{a,b} = [Q(0,a,b), ..., Q(|S|-1,a,b)]` in
//! `(a, b)` order, so `Q(s, a, b)` sits at `((a * |B|) + b) * |S| + s`. The
//! transition matrix stacks the `|S| x |S|` blocks `P_{a,b}` the same way,
//! and the selection matrix `M` picks one entry per state. With these,
//! a full step reads `Q_{k+1} = r + gamma * P * M_{[a_k, b_k]} * Q_k`.
//!
//! The follower policy of the game is `S x A -> B`, while `M` takes an
//! `S -> B` map; [`SelectionMatrix::from_pair`] composes the two as
//! `psi(s) = b(s, a(s))`.

use thiserror::Error;

use crate::game::{Dims, MarkovGame, Player, QTensor};
use crate::qvi::{greedy_pair, qvi_step, LeaderPolicy, PolicyPair};

#[derive(Debug, Error, PartialEq)]
pub enum LinearError {
    #[error("vector length {found} does not match {dims} ({expected} entries)")]
    LengthMismatch {
        dims: Dims,
        expected: usize,
        found: usize,
    },
}

/// Position of `Q(s, a, b)` in the stacked Q-vector.
#[inline]
pub fn flat_index(dims: Dims, s: usize, a: usize, b: usize) -> usize {
    (a * dims.follower_actions + b) * dims.states + s
}

#[derive(Clone, Debug, PartialEq)]
pub struct QVector {
    dims: Dims,
    values: Vec<f64>,
}

impl QVector {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self, LinearError> {
        if values.len() != dims.len() {
            return Err(LinearError::LengthMismatch {
                dims,
                expected: dims.len(),
                found: values.len(),
            });
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn flatten(q: &QTensor) -> QVector {
    let dims = q.dims();
    let mut values = vec![0.0; dims.len()];
    for (s, a, b) in dims.triples() {
        values[flat_index(dims, s, a, b)] = q.get(s, a, b);
    }
    QVector { dims, values }
}

pub fn unflatten(v: &QVector, player: Player) -> QTensor {
    let dims = v.dims;
    let mut q = QTensor::zeros(player, dims);
    for (s, a, b) in dims.triples() {
        q.set(s, a, b, v.values[flat_index(dims, s, a, b)]);
    }
    q
}

/// The stacked `(|S||A||B|) x |S|` transition matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    dims: Dims,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn rows(&self) -> usize {
        self.dims.len()
    }

    pub fn cols(&self) -> usize {
        self.dims.states
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.dims.states;
        &self.data[i * n..(i + 1) * n]
    }

    /// `P * x` for a vector over states; sums over columns in ascending order.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols());
        (0..self.rows())
            .map(|i| self.row(i).iter().zip(x).map(|(p, v)| p * v).sum())
            .collect()
    }
}

pub fn build_transition_matrix(game: &MarkovGame) -> TransitionMatrix {
    let dims = game.dims();
    let n = dims.states;
    let mut data = vec![0.0; dims.len() * n];
    for (s, a, b) in dims.triples() {
        let row = flat_index(dims, s, a, b);
        data[row * n..(row + 1) * n].copy_from_slice(game.transition_row(s, a, b));
    }
    TransitionMatrix { dims, data }
}

/// Sparse `|S| x (|S||A||B|)` 0/1 matrix with exactly one unit per row.
/// Row `s` is `e_{phi(s)} (x) e_{psi(s)} (x) e_s`, stored as its column index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMatrix {
    dims: Dims,
    columns: Vec<usize>,
}

impl SelectionMatrix {
    /// From a leader map `phi: S -> A` and a follower map `psi: S -> B`.
    pub fn from_maps(dims: Dims, phi: &[usize], psi: &[usize]) -> Self {
        assert_eq!(phi.len(), dims.states);
        assert_eq!(psi.len(), dims.states);
        let columns = (0..dims.states)
            .map(|s| flat_index(dims, s, phi[s], psi[s]))
            .collect();
        Self { dims, columns }
    }

    /// `M_{[a, b]}` with `psi(s) = b(s, a(s))`.
    pub fn from_pair(dims: Dims, pair: &PolicyPair) -> Self {
        Self::from_maps(
            dims,
            pair.leader.actions(),
            &pair.follower.compose(&pair.leader),
        )
    }

    /// `M_{[phi, psi]}` where the follower map is already `S -> B`.
    pub fn from_leader_and_map(dims: Dims, leader: &LeaderPolicy, psi: &[usize]) -> Self {
        Self::from_maps(dims, leader.actions(), psi)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Column index of the single unit entry of each row.
    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    /// `M * v`.
    pub fn select(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dims.len());
        self.columns.iter().map(|&c| v[c]).collect()
    }
}

pub fn build_selection_matrix(dims: Dims, pair: &PolicyPair) -> SelectionMatrix {
    SelectionMatrix::from_pair(dims, pair)
}

/// `gamma * P * M * v`.
pub fn propagate(gamma: f64, p: &TransitionMatrix, m: &SelectionMatrix, v: &[f64]) -> Vec<f64> {
    p.apply(&m.select(v)).into_iter().map(|x| gamma * x).collect()
}

/// Vector-form step `r + gamma * P * M_{[a_k, b_k]} * Q_k` for both players.
pub fn vector_qvi_step(game: &MarkovGame, q1: &QTensor, q2: &QTensor) -> (QVector, QVector) {
    let dims = game.dims();
    let p = build_transition_matrix(game);
    let m = build_selection_matrix(dims, &greedy_pair(q1, q2));
    let step = |q: &QTensor, player: Player| {
        let r = flatten(&QTensor::rewards_of(game, player));
        let next = propagate(game.gamma(), &p, &m, flatten(q).values());
        let values = r.values().iter().zip(next).map(|(r, x)| r + x).collect();
        QVector { dims, values }
    };
    (step(q1, Player::Leader), step(q2, Player::Follower))
}

/// Max absolute difference between the scalar step and its matrix form.
pub fn vector_qvi_residual(
    game: &MarkovGame,
    q1: &QTensor,
    q2: &QTensor,
) -> Result<f64, crate::game::GameError> {
    let scalar = qvi_step(game, q1, q2)?;
    let (v1, v2) = vector_qvi_step(game, q1, q2);
    let d1 = flatten(&scalar.q_leader);
    let d2 = flatten(&scalar.q_follower);
    Ok(d1
        .values()
        .iter()
        .zip(v1.values())
        .chain(d2.values().iter().zip(v2.values()))
        .fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}
