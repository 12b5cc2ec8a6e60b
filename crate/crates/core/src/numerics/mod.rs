//! Dense tensors, reverse-mode differentiation and gradient verification.

mod cell;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use cell::recurrent_cell_step;
pub use gradcheck::{
    check_parameters, failing_ops, gradient_check, op_self_test, relative_error, vjp_check, GradReport, ParamCheck,
    ParamCheckReport,
};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::RngState;
pub use tensor::Tensor;

pub(crate) use params::hex;

/// Regularizer added to every standardization and normalization denominator.
pub const EPS: f64 = 1e-5;
