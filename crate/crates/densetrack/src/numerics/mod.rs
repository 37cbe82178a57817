//! Minimal dense-tensor library with reverse-mode differentiation.
//!
//! Exactly the kernels the tracking architecture needs: conv2d, average
//! pooling, bilinear sampling, multi-head attention, layer/instance norm,
//! GELU/sigmoid/softmax, and a tape-free Rc-graph autodiff engine. fp32 is
//! the working dtype; every op is also instantiated for fp64 so gradients
//! can be verified with central finite differences.

pub mod checkpoint;
pub mod element;
pub mod gradcheck;
pub mod layers;
pub mod matmul;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod tensor;

pub use element::{Dtype, Element};
pub use layers::{Conv2d, LayerNorm, LayerScale, Linear, MultiHeadAttention};
pub use ops::attention::multi_head_sdpa;
pub use ops::conv::{avg_pool2d, bicubic_resize, conv2d, conv_out_dim, ConvSpec};
pub use ops::dense::{instance_norm2d, layer_norm, linear};
pub use ops::pointwise::{bce_mean, gelu, relu, scale_lastdim, sigmoid, softmax, tanh};
pub use ops::sample::{bilinear_sample, nearest_sample, round_half_away};
pub use params::{InitCtx, Param, ParamSet};
pub use tensor::{concat, grad_enabled, no_grad, Tensor};
