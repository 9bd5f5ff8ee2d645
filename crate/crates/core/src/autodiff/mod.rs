//! Reverse-mode differentiation over dense arrays.
//!
//! Each op on a [`Graph`] computes its value immediately and records what the
//! reverse pass needs. [`Graph::backward`] walks the record newest-first and
//! accumulates gradients for every node that depends on a differentiable leaf.

mod attention;
mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamError, GRAD_FLOOR};
pub use graph::{AttnSpec, Gradients, Graph, PoolKind, Var};
