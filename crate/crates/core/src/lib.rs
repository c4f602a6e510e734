//! Vehicle routing through per-truck binary optimization.
//!
//! The crate builds one polynomial unconstrained binary optimization problem
//! per truck from the remaining overall demand, minimizes it with simulated
//! annealing (or an external quadratic solver), deducts the demand the route
//! is expected to carry, and repeats. The resulting routes are then replayed
//! against individually tracked boxes in an event-driven simulation.

pub mod anneal;
pub mod binpoly;
pub mod matrix;
pub mod model;
pub mod pubo_builder;
pub mod seed;
pub mod simulate;
pub mod truck_loop;

pub use binpoly::{BinaryPolynomial, Penalty, PolyError, Reduction};
pub use matrix::Matrix;
