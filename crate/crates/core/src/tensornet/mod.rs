//! A small differentiable engine: just the operators a CFN branch and head
//! need, each with a hand-written backward pass.

mod gradcheck;
mod graph;
mod ops;
mod optim;
mod tensor;

pub use gradcheck::{central_difference, gradient_check, max_relative_error, relative_error, sample_coordinates};
pub use graph::{count_params, infer_shapes, Init, LayerParams, LayerSpec, ParamSet, SeqTrace, Sequential};
pub use ops::{
    concat, conv2d, conv2d_backward, flatten, linear, linear_backward, maxpool, maxpool_backward, relu, relu_backward,
    softmax, softmax_cross_entropy, split, window_output, ConvGrads, ConvParams, LinearGrads,
};
pub use optim::{sgd_step, Sgd};
pub use tensor::{Scalar, Tensor};
