//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] evaluates every primitive eagerly and records it on a tape.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for the
//! differentiable leaves. Broadcasting in binary ops is limited to a scalar
//! operand or an operand whose shape is a trailing suffix of the other's;
//! anything else goes through the explicit [`Graph::broadcast`].

mod array;
mod check;
mod graph;
mod lstm;

pub use array::Array;
pub use check::{grad_check, primitive_report};
pub use graph::{Gradients, Graph, Var};
