//! Dense tensors, a reverse-mode tape, finite-difference checking and Adam.

mod adam;
mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport};
pub use tape::{
    bce_mean, order_free_sum, segment_softmax, sigmoid, Activation, Gradients, Tape, Var,
    LEAKY_RELU_SLOPE,
};
pub use tensor::Tensor;
