//! Layer primitives and their adjoints.
//!
//! Forward functions are pure. Each parametric op has a matching
//! `*_backward` taking the forward inputs (or saved outputs) plus the
//! upstream gradient and returning the input gradient and parameter
//! gradients.

mod activation;
mod conv;
mod gemm;
mod linear;
mod norm;
mod pool;
mod shuffle;

pub use activation::{
    leaky_relu, leaky_relu_backward, prelu, prelu_backward, relu6, relu6_backward, sigmoid,
    sigmoid_backward, LEAKY_SLOPE, PRELU_INIT, SIGMOID_CLAMP,
};
pub use conv::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, ds_conv2d,
    ds_conv2d_backward, separable_conv_weights, standard_conv_weights, ConvGrads, ConvParams,
    DsConvGrads, ParamGrads,
};
pub use linear::{linear, linear_backward, LinearGrads, LinearParams};
pub use norm::{BatchNormCache, BatchNormGrads, BatchNormState, Mode, BN_EPS, BN_MOMENTUM};
pub use pool::{adaptive_avg_pool, adaptive_avg_pool_backward};
pub use shuffle::{pixel_shuffle, pixel_shuffle_backward, pixel_unshuffle};
