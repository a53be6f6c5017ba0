//! A compact CPU neural-network engine with explicit, layer-wise backpropagation.
//!
//! Every layer offers an evaluation-mode `forward(&self, ..)` that never mutates state,
//! a `forward_cached` / `forward_train` variant that returns whatever the backward pass
//! needs, and a `backward` that accumulates parameter gradients and returns the gradient
//! with respect to the layer input. Convolutions lower to GEMM through `matrixmultiply`.
//!
//! All layers are generic over [`Real`] so the same model code runs in `f32` for training
//! and in `f64` for finite-difference gradient checks.

mod archive;
mod conv;
mod layers;
mod norm;
mod optim;
mod param;
mod real;
mod tensor;

pub use archive::{Archive, ArchiveHeader, TensorEntry};
pub use conv::{Conv2d, ConvCache};
pub use layers::{
    concat_channels, global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward,
    sigmoid, sigmoid_backward, silu, silu_backward, split_channels, upsample_bilinear2x,
    upsample_bilinear2x_backward, Linear,
};
pub use norm::{BatchNorm2d, BatchNormCache};
pub use optim::{clip_grad_norm, grad_norm, zero_grad, AdamW, AdamWConfig};
pub use param::{join_name, Module, Param};
pub use real::Real;
pub use tensor::Tensor;
