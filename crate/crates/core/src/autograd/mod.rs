//! Reverse-mode automatic differentiation over a per-forward tape.

pub mod check;
mod graph;

pub use check::{finite_diff_at, finite_diff_grad, relative_error, DEFAULT_REL_TOL, DEFAULT_STEP};
pub use graph::{BranchPattern, Gradients, Graph, GraphMode, OpKind, Var};
