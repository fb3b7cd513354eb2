//! Tape-based reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod op;
pub mod primitive;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_fn, GradCheckConfig, GradCheckReport, GradTarget, Precision};
pub use op::Op;
pub use primitive::{forward_primitive, Attr, Attrs};
pub use tape::{Gradients, Node, NodeId, Tape, Var};
