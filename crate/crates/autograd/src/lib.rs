//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]; calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! for every node that transitively depends on a trainable leaf. Values are
//! `f64` dynamic-rank arrays, which keeps finite-difference checks meaningful
//! at double precision.
//!
//! Nodes that do not depend on a trainable leaf carry no gradient at all, so
//! [`Var::detach`] gives exact (not approximate) gradient isolation.

mod nn;
mod tape;

pub use nn::{BatchNormOutput, Conv2dSpec};
pub use tape::{Gradients, Tape, Var};

/// Value type carried by every tape node.
pub type Array = ndarray::ArrayD<f64>;
