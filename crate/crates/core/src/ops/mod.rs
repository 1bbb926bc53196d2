//! Differentiable primitives. Each forward has a hand-written VJP next to it.

pub mod activation;
pub mod conv;
pub mod dft;
pub(crate) mod gemm;
pub mod linear;
pub mod rotate;

pub use activation::{leaky_relu, leaky_relu_backward, relu, relu_backward};
pub use conv::{
    bias_grad, conv1d, conv2d, conv2d_forward, conv2d_input_grad, conv2d_transpose,
    conv2d_transpose_to, conv2d_weight_grad, ConvSpec,
};
pub use dft::{dft_1d, idft_1d, Complex, DftPlan};
pub use linear::{linear, linear_bias_grad, linear_input_grad, linear_weight_grad};
pub use rotate::{rotate_bilinear, rotate_bilinear_adjoint, RotationPlan};
