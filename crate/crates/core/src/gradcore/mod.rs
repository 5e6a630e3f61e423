//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod array;
mod check;
mod params;
mod tape;

pub use array::Array;
pub use check::grad_check;
pub use params::{sgd_step, Grads, ParamStore, Sgd};
pub use tape::{softmax_rows, Activation, NodeGrads, NodeId, Tape};
