//! Multi-agent path finding under stochastic travel times.
//!
//! Agents move on a weighted graph and accumulate gamma-distributed delay at
//! every node they traverse. The solver is a conflict-based search whose
//! conflicts are *probabilities*: a pair of agents is in conflict at a node or
//! an opposing edge segment when the analytic probability of simultaneous
//! occupancy exceeds a threshold `epsilon`. Constraints are release times
//! (earliest permitted arrival at an element) found by stepping or binary
//! search on the conflict probability.
//!
//! Module map:
//! - [`instance`]: problem representation, JSON IO, grid generator
//! - [`prob`]: gamma special functions and the conflict-probability integrals
//! - [`lowlevel`]: single-agent planner minimizing expected travel time
//! - [`search`]: the high-level constraint-tree search and a deterministic
//!   CBS baseline
//! - [`sim`]: Monte Carlo execution of schedules; the empirical estimator and
//!   numerical oracle for the analytic probabilities
//! - [`cli`]: command-line front end (`gen`, `solve`, `validate`, `bench`)

pub mod cli;
pub mod instance;
pub mod lowlevel;
pub mod prob;
pub mod search;
pub mod sim;
