//! Stackelberg Q-value iteration for tabular two-player general-sum Markov
//! games, with the switching-system comparison iterations, relaxed
//! best-response slacks, finite-time error bounds and an exhaustive
//! equilibrium oracle.
//!
//! Module map:
//! - [`game`]: the game model, validation, JSON I/O, random generation.
//! - [`qvi`]: greedy policies, the iteration step, traces, cycle detection.
//! - [`linear`]: stacked Q-vectors, transition and selection matrices.
//! - [`epsilon`]: slacks of the relaxed best-response condition.
//! - [`comparison`]: upper/lower comparison systems and error bounds.
//! - [`oracle`]: policy evaluation, equilibrium verification and enumeration.
//! - [`report`]: per-run analysis and CSV export.
//! - [`cli`]: the `sqvi` command-line tool.

pub mod cli;
pub mod comparison;
pub mod epsilon;
pub mod game;
pub mod linear;
pub mod oracle;
pub mod qvi;
pub mod report;

pub use game::{Dims, MarkovGame, Player, QTensor};
pub use qvi::{FollowerPolicy, IterationTrace, LeaderPolicy, PolicyPair};
