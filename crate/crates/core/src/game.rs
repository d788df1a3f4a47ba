//! Tabular two-player general-sum Markov games.
//!
//! All indices are 0-based. The leader picks `a` in `0..num_leader_actions`,
//! the follower observes it and picks `b` in `0..num_follower_actions`.
//! Tensors are stored flat in row-major `(s, a, b)` order; the transition
//! tensor appends the next state as the fastest axis, `(s, a, b, s')`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Row sums of the transition tensor must be within this of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Shape of a game: `(|S|, |A|, |B|)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub states: usize,
    pub leader_actions: usize,
    pub follower_actions: usize,
}

impl Dims {
    pub fn new(states: usize, leader_actions: usize, follower_actions: usize) -> Self {
        Self {
            states,
            leader_actions,
            follower_actions,
        }
    }

    /// Number of `(s, a, b)` triples.
    pub fn len(&self) -> usize {
        self.states * self.leader_actions * self.follower_actions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major offset of `(s, a, b)` in a Q- or reward tensor.
    #[inline]
    pub fn index(&self, s: usize, a: usize, b: usize) -> usize {
        (s * self.leader_actions + a) * self.follower_actions + b
    }

    /// Iterate over all `(s, a, b)` triples in storage order.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (na, nb) = (self.leader_actions, self.follower_actions);
        (0..self.states).flat_map(move |s| (0..na).flat_map(move |a| (0..nb).map(move |b| (s, a, b))))
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}",
            self.states, self.leader_actions, self.follower_actions
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Player {
    Leader,
    Follower,
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Player::Leader => f.write_str("leader"),
            Player::Follower => f.write_str("follower"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("dimension mismatch in `{field}`{}: expected {expected}, found {found}", fmt_path(.path))]
    DimensionMismatch {
        field: &'static str,
        path: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("dimensions must be positive, got {0}")]
    EmptyDimension(Dims),
    #[error("tensor shape {found} does not match game shape {expected}")]
    ShapeMismatch { expected: Dims, found: Dims },
    #[error("non-finite entry in {player} Q-tensor at (s={s}, a={a}, b={b})")]
    NonFinite {
        player: Player,
        s: usize,
        a: usize,
        b: usize,
    },
}

fn fmt_path(path: &[usize]) -> String {
    if path.is_empty() {
        String::new()
    } else {
        let idx: Vec<String> = path.iter().map(|i| i.to_string()).collect();
        format!(" at [{}]", idx.join("]["))
    }
}

/// A single broken invariant found by [`validate_game`].
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    GammaOutOfRange {
        gamma: f64,
    },
    TransitionEntryOutOfRange {
        s: usize,
        a: usize,
        b: usize,
        next: usize,
        value: f64,
    },
    RowNotStochastic {
        s: usize,
        a: usize,
        b: usize,
        sum: f64,
    },
    RewardOutOfBounds {
        player: Player,
        s: usize,
        a: usize,
        b: usize,
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::GammaOutOfRange { gamma } => {
                write!(f, "discount factor {gamma} outside [0, 1)")
            }
            Violation::TransitionEntryOutOfRange {
                s,
                a,
                b,
                next,
                value,
            } => write!(
                f,
                "transition P({next} | s={s}, a={a}, b={b}) = {value} outside [0, 1]"
            ),
            Violation::RowNotStochastic { s, a, b, sum } => write!(
                f,
                "transition row (s={s}, a={a}, b={b}) sums to {sum}, not 1"
            ),
            Violation::RewardOutOfBounds {
                player,
                s,
                a,
                b,
                value,
            } => write!(
                f,
                "{player} reward at (s={s}, a={a}, b={b}) = {value} outside [-1, 1]"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovGame {
    dims: Dims,
    gamma: f64,
    transition: Vec<f64>,
    reward_leader: Vec<f64>,
    reward_follower: Vec<f64>,
}

impl MarkovGame {
    /// Builds a game from flat tensors. Only shapes are checked here; use
    /// [`validate_game`] for the stochasticity and reward-bound invariants.
    pub fn new(
        dims: Dims,
        gamma: f64,
        transition: Vec<f64>,
        reward_leader: Vec<f64>,
        reward_follower: Vec<f64>,
    ) -> Result<Self, GameError> {
        if dims.is_empty() {
            return Err(GameError::EmptyDimension(dims));
        }
        let n = dims.len();
        let checks = [
            ("transition", n * dims.states, transition.len()),
            ("reward_leader", n, reward_leader.len()),
            ("reward_follower", n, reward_follower.len()),
        ];
        for (field, expected, found) in checks {
            if expected != found {
                return Err(GameError::DimensionMismatch {
                    field,
                    path: Vec::new(),
                    expected,
                    found,
                });
            }
        }
        Ok(Self {
            dims,
            gamma,
            transition,
            reward_leader,
            reward_follower,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `P(next | s, a, b)`.
    #[inline]
    pub fn transition(&self, s: usize, a: usize, b: usize, next: usize) -> f64 {
        self.transition[self.dims.index(s, a, b) * self.dims.states + next]
    }

    /// The distribution over next states for `(s, a, b)`.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize, b: usize) -> &[f64] {
        let start = self.dims.index(s, a, b) * self.dims.states;
        &self.transition[start..start + self.dims.states]
    }

    pub fn reward(&self, player: Player, s: usize, a: usize, b: usize) -> f64 {
        self.rewards(player)[self.dims.index(s, a, b)]
    }

    /// Flat `(s, a, b)` reward tensor of one player.
    pub fn rewards(&self, player: Player) -> &[f64] {
        match player {
            Player::Leader => &self.reward_leader,
            Player::Follower => &self.reward_follower,
        }
    }

    /// Hex SHA-256 of the serialized game, used to tag traces.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(save_game(self).as_bytes());
        digest.iter().map(|byte| format!("{byte:02x}")).collect()
    }

    /// The single-state experiment game: one absorbing state, two actions per
    /// player, discount 0.8.
    pub fn builtin_example() -> Self {
        // (a, b) order: (0,0), (0,1), (1,0), (1,1)
        let reward_leader = vec![0.8, 0.2, 0.5, 0.9];
        let reward_follower = vec![0.3, 0.9, 0.8, 0.1];
        Self::new(
            Dims::new(1, 2, 2),
            0.8,
            vec![1.0; 4],
            reward_leader,
            reward_follower,
        )
        .expect("builtin game has consistent shape")
    }
}

/// Checks the transition, reward and discount invariants.
pub fn validate_game(game: &MarkovGame) -> ValidationReport {
    let mut violations = Vec::new();
    if !(0.0..1.0).contains(&game.gamma) {
        violations.push(Violation::GammaOutOfRange { gamma: game.gamma });
    }
    let dims = game.dims;
    for (s, a, b) in dims.triples() {
        let row = game.transition_row(s, a, b);
        for (next, &value) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                violations.push(Violation::TransitionEntryOutOfRange {
                    s,
                    a,
                    b,
                    next,
                    value,
                });
            }
        }
        let sum: f64 = row.iter().sum();
        if sum.is_nan() || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            violations.push(Violation::RowNotStochastic { s, a, b, sum });
        }
    }
    for player in [Player::Leader, Player::Follower] {
        for (s, a, b) in dims.triples() {
            let value = game.reward(player, s, a, b);
            if value.is_nan() || value.abs() > 1.0 {
                violations.push(Violation::RewardOutOfBounds {
                    player,
                    s,
                    a,
                    b,
                    value,
                });
            }
        }
    }
    ValidationReport { violations }
}

/// Random game with rewards uniform on `[-1, 1]` and full-support transition
/// rows (independent uniform draws normalized to sum 1).
///
/// Draw order: all transition rows in `(s, a, b)` order, then the leader
/// rewards, then the follower rewards.
pub fn random_game(seed: u64, dims: Dims, gamma: f64) -> MarkovGame {
    assert!(!dims.is_empty(), "random_game needs positive dimensions");
    assert!((0.0..1.0).contains(&gamma), "gamma must lie in [0, 1)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::with_capacity(dims.len() * dims.states);
    for _ in 0..dims.len() {
        // Open interval keeps every row strictly positive.
        let row: Vec<f64> = (0..dims.states)
            .map(|_| loop {
                let x: f64 = rng.gen();
                if x > 0.0 {
                    break x;
                }
            })
            .collect();
        let total: f64 = row.iter().sum();
        transition.extend(row.iter().map(|x| x / total));
    }
    let mut draw_rewards = || -> Vec<f64> {
        (0..dims.len())
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect()
    };
    let reward_leader = draw_rewards();
    let reward_follower = draw_rewards();
    MarkovGame::new(dims, gamma, transition, reward_leader, reward_follower)
        .expect("generated tensors have the requested shape")
}

/// A Q-function of one player over `(s, a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    player: Player,
    dims: Dims,
    values: Vec<f64>,
}

impl QTensor {
    pub fn zeros(player: Player, dims: Dims) -> Self {
        Self {
            player,
            dims,
            values: vec![0.0; dims.len()],
        }
    }

    pub fn from_values(player: Player, dims: Dims, values: Vec<f64>) -> Result<Self, GameError> {
        if values.len() != dims.len() {
            return Err(GameError::DimensionMismatch {
                field: "values",
                path: Vec::new(),
                expected: dims.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            player,
            dims,
            values,
        })
    }

    /// The player's reward tensor viewed as a Q-function.
    pub fn rewards_of(game: &MarkovGame, player: Player) -> Self {
        Self {
            player,
            dims: game.dims(),
            values: game.rewards(player).to_vec(),
        }
    }

    pub fn player(&self) -> Player {
        self.player
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize, b: usize) -> f64 {
        self.values[self.dims.index(s, a, b)]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, b: usize, value: f64) {
        let i = self.dims.index(s, a, b);
        self.values[i] = value;
    }

    /// The `|B|` follower-action slice at `(s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.dims.index(s, a, 0);
        &self.values[start..start + self.dims.follower_actions]
    }

    /// Sup-norm `max |Q(s,a,b)|`.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sup-norm of `self - other`.
    pub fn sup_distance(&self, other: &QTensor) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            player: self.player,
            dims: self.dims,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Error unless the shape is `dims` and every entry is finite.
    pub fn check(&self, dims: Dims) -> Result<(), GameError> {
        if self.dims != dims {
            return Err(GameError::ShapeMismatch {
                expected: dims,
                found: self.dims,
            });
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            let nb = dims.follower_actions;
            let na = dims.leader_actions;
            return Err(GameError::NonFinite {
                player: self.player,
                s: i / (na * nb),
                a: (i / nb) % na,
                b: i % nb,
            });
        }
        Ok(())
    }
}

/// Formats a real with 17 significant digits; the output parses back to the
/// same `f64`.
pub fn format_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        // JSON has no literal for these; callers only hit this for traces.
        format!("{x}")
    }
}

#[derive(Deserialize)]
struct GameFile {
    num_states: usize,
    num_leader_actions: usize,
    num_follower_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    reward_leader: Vec<Vec<Vec<f64>>>,
    reward_follower: Vec<Vec<Vec<f64>>>,
}

fn flatten_checked<T>(
    field: &'static str,
    data: Vec<T>,
    shape: &[usize],
    path: &mut Vec<usize>,
    out: &mut Vec<f64>,
) -> Result<(), GameError>
where
    T: Nested,
{
    if data.len() != shape[0] {
        return Err(GameError::DimensionMismatch {
            field,
            path: path.clone(),
            expected: shape[0],
            found: data.len(),
        });
    }
    for (i, item) in data.into_iter().enumerate() {
        path.push(i);
        item.flatten_into(field, &shape[1..], path, out)?;
        path.pop();
    }
    Ok(())
}

trait Nested {
    fn flatten_into(
        self,
        field: &'static str,
        shape: &[usize],
        path: &mut Vec<usize>,
        out: &mut Vec<f64>,
    ) -> Result<(), GameError>;
}

impl Nested for f64 {
    fn flatten_into(
        self,
        _: &'static str,
        _: &[usize],
        _: &mut Vec<usize>,
        out: &mut Vec<f64>,
    ) -> Result<(), GameError> {
        out.push(self);
        Ok(())
    }
}

impl<T: Nested> Nested for Vec<T> {
    fn flatten_into(
        self,
        field: &'static str,
        shape: &[usize],
        path: &mut Vec<usize>,
        out: &mut Vec<f64>,
    ) -> Result<(), GameError> {
        flatten_checked(field, self, shape, path, out)
    }
}

/// Parses a game from its JSON file format.
pub fn load_game(text: &str) -> Result<MarkovGame, GameError> {
    let file: GameFile = serde_json::from_str(text).map_err(|e| GameError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let dims = Dims::new(
        file.num_states,
        file.num_leader_actions,
        file.num_follower_actions,
    );
    if dims.is_empty() {
        return Err(GameError::EmptyDimension(dims));
    }
    let (ns, na, nb) = (dims.states, dims.leader_actions, dims.follower_actions);
    let mut transition = Vec::with_capacity(dims.len() * ns);
    flatten_checked(
        "transition",
        file.transition,
        &[ns, na, nb, ns],
        &mut Vec::new(),
        &mut transition,
    )?;
    let mut reward_leader = Vec::with_capacity(dims.len());
    flatten_checked(
        "reward_leader",
        file.reward_leader,
        &[ns, na, nb],
        &mut Vec::new(),
        &mut reward_leader,
    )?;
    let mut reward_follower = Vec::with_capacity(dims.len());
    flatten_checked(
        "reward_follower",
        file.reward_follower,
        &[ns, na, nb],
        &mut Vec::new(),
        &mut reward_follower,
    )?;
    MarkovGame::new(dims, file.gamma, transition, reward_leader, reward_follower)
}

fn write_nested(out: &mut String, values: &[f64], shape: &[usize], indent: usize) {
    if shape.len() == 1 {
        out.push('[');
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(&format_real(*v));
        }
        out.push(']');
        return;
    }
    let stride: usize = shape[1..].iter().product();
    let pad = " ".repeat(indent + 2);
    out.push_str("[\n");
    for (i, chunk) in values.chunks(stride).enumerate() {
        out.push_str(&pad);
        write_nested(out, chunk, &shape[1..], indent + 2);
        if i + 1 < shape[0] {
            out.push(',');
        }
        out.push('\n');
    }
    out.push_str(&" ".repeat(indent));
    out.push(']');
}

/// Serializes a game as JSON with 17 significant digits per real.
pub fn save_game(game: &MarkovGame) -> String {
    let d = game.dims;
    let (ns, na, nb) = (d.states, d.leader_actions, d.follower_actions);
    let mut out = String::new();
    out.push_str("{\n");
    out.push_str(&format!("  \"num_states\": {ns},\n"));
    out.push_str(&format!("  \"num_leader_actions\": {na},\n"));
    out.push_str(&format!("  \"num_follower_actions\": {nb},\n"));
    out.push_str(&format!("  \"gamma\": {},\n", format_real(game.gamma)));
    out.push_str("  \"transition\": ");
    write_nested(&mut out, &game.transition, &[ns, na, nb, ns], 2);
    out.push_str(",\n  \"reward_leader\": ");
    write_nested(&mut out, &game.reward_leader, &[ns, na, nb], 2);
    out.push_str(",\n  \"reward_follower\": ");
    write_nested(&mut out, &game.reward_follower, &[ns, na, nb], 2);
    out.push_str("\n}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_game_is_valid() {
        let g = MarkovGame::builtin_example();
        assert!(validate_game(&g).is_valid());
        assert_eq!(g.gamma(), 0.8);
        // r1(s=1, a=2, b=2) in 1-based labels
        assert_eq!(g.reward(Player::Leader, 0, 1, 1), 0.9);
        assert_eq!(g.reward(Player::Follower, 0, 0, 1), 0.9);
    }

    #[test]
    fn short_row_is_reported_with_its_index() {
        let mut g = MarkovGame::builtin_example();
        g.transition[2] = 0.9;
        let report = validate_game(&g);
        assert_eq!(
            report.violations,
            vec![Violation::RowNotStochastic {
                s: 0,
                a: 1,
                b: 0,
                sum: 0.9
            }]
        );
    }

    #[test]
    fn reward_above_one_is_reported() {
        let mut g = MarkovGame::builtin_example();
        g.reward_leader[3] = 1.5;
        let report = validate_game(&g);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(
            report.violations[0],
            Violation::RewardOutOfBounds {
                player: Player::Leader,
                s: 0,
                a: 1,
                b: 1,
                ..
            }
        ));
    }

    #[test]
    fn gamma_and_negative_probability_are_reported() {
        let mut g = MarkovGame::builtin_example();
        g.gamma = 1.0;
        g.transition[0] = -0.1;
        let kinds: Vec<_> = validate_game(&g)
            .violations
            .into_iter()
            .map(|v| std::mem::discriminant(&v))
            .collect();
        assert_eq!(kinds.len(), 3);
    }

    #[test]
    fn nan_reward_is_a_violation() {
        let mut g = MarkovGame::builtin_example();
        g.reward_follower[0] = f64::NAN;
        assert!(!validate_game(&g).is_valid());
    }

    #[test]
    fn load_builtin_text() {
        let text = save_game(&MarkovGame::builtin_example());
        let g = load_game(&text).unwrap();
        assert_eq!(g.reward(Player::Leader, 0, 1, 1), 0.9);
        assert_eq!(g, MarkovGame::builtin_example());
    }

    #[test]
    fn empty_text_is_a_parse_error() {
        assert!(matches!(load_game(""), Err(GameError::Parse { .. })));
    }

    #[test]
    fn parse_error_carries_position() {
        let err = load_game("{\n  \"num_states\": 1,\n  \"gamma\": oops\n}").unwrap_err();
        match err {
            GameError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_transition_length_is_a_dimension_mismatch() {
        let text = r#"{
            "num_states": 1, "num_leader_actions": 2, "num_follower_actions": 2,
            "gamma": 0.8,
            "transition": [[[[1.0], [1.0]], [[1.0], [1.0, 0.0]]]],
            "reward_leader": [[[0.8, 0.2], [0.5, 0.9]]],
            "reward_follower": [[[0.3, 0.9], [0.8, 0.1]]]
        }"#;
        let err = load_game(text).unwrap_err();
        assert_eq!(
            err,
            GameError::DimensionMismatch {
                field: "transition",
                path: vec![0, 1, 1],
                expected: 1,
                found: 2
            }
        );
        assert!(err.to_string().contains("[0][1][1]"));
    }

    #[test]
    fn random_game_is_deterministic_in_seed() {
        let dims = Dims::new(3, 2, 2);
        let g1 = random_game(7, dims, 0.9);
        let g2 = random_game(7, dims, 0.9);
        assert_eq!(g1, g2);
        assert!(validate_game(&g1).is_valid());
        let g3 = random_game(8, dims, 0.9);
        assert_ne!(g1.transition, g3.transition);
        assert_ne!(g1.reward_leader, g3.reward_leader);
    }

    #[test]
    fn format_real_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 0.0, -0.0, 1e300, f64::MIN_POSITIVE] {
            let y: f64 = format_real(x).parse().unwrap();
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn q_tensor_rejects_non_finite() {
        let dims = Dims::new(2, 2, 3);
        let mut q = QTensor::zeros(Player::Follower, dims);
        q.set(1, 0, 2, f64::INFINITY);
        assert_eq!(
            q.check(dims),
            Err(GameError::NonFinite {
                player: Player::Follower,
                s: 1,
                a: 0,
                b: 2
            })
        );
    }
}
