//! Deterministic dense numerics: matrices, eigendecomposition, linear
//! solves, elementwise kernels, and a reverse-mode gradient tape.
//!
//! Every routine here uses fixed loop orders and plain f64 arithmetic so
//! that identical inputs produce bit-identical outputs across runs and
//! machines with IEEE-754 doubles. Nothing in this module allocates
//! threads or reads global state.

pub mod eigen;
pub mod fpmx;
pub mod kernels;
pub mod matrix;
pub mod solve;
pub mod tape;

pub use eigen::symmetric_eigendecomposition;
pub use matrix::Matrix;
pub use solve::solve_linear_system;
pub use tape::{finite_difference_gradient, GradTape, Gradients, Slot};
