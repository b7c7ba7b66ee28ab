//! Large neighborhood search for the vehicle routing problem with time
//! windows, using a learned construction policy as repair operator.
//!
//! The pieces, bottom-up:
//! - [`instance`]: problem data, Solomon parsing, instance sampling.
//! - [`solution`]: routes, schedules, cost, validation, similarity.
//! - [`construct`]: the sequential construction process and repair.
//! - [`neural`]: the graph-network policy, its training and checkpoints.
//! - [`destroy`]: partial and complete route destruction operators.
//! - [`gls`]: guided local search over relocate/exchange/2-opt/or-opt/cross moves.
//! - [`lns`]: the population-based destroy-and-repair loop.
//! - [`harness`]: CLI, configuration, exact oracle, reports.

pub mod construct;
pub mod destroy;
pub mod gls;
pub mod harness;
pub mod instance;
pub mod lns;
pub mod neural;
pub mod solution;

pub use construct::{DecodeMode, DistanceGreedy, Scorer};
pub use instance::{Instance, Node};
pub use solution::{check_solution, cost, Route, Solution};
