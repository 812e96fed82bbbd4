//! Reverse-mode automatic differentiation over a recorded tape.

pub mod gradcheck;
mod graph;
pub mod kernels;

pub use graph::{Graph, Var};
