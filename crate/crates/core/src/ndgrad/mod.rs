//! Dense arrays and reverse-mode automatic differentiation.

mod array;
mod conv;
mod gradcheck;
mod graph;
mod scalar;

pub use array::Array;
pub use conv::Padding;
pub use gradcheck::finite_diff_check;
pub use graph::{
    BnBatchStats, BnRunning, Gradients, Graph, Mode, Var, BN_EPS, BN_MOMENTUM, L2_EPS,
};
pub use scalar::{DType, Float};

#[allow(unused_imports)]
pub(crate) use graph::softmax_in_place;
