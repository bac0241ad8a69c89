//! Differentiable layer primitives. Every forward op has a matching
//! hand-written backward; networks compose them explicitly.

mod activation;
mod conv;
mod linear;
mod pool;
mod shuffle;

pub use activation::Activation;
pub use conv::{conv2d, conv2d_backward, conv2d_input_grad, conv2d_param_grad, ConvGrads, ConvParams};
pub use linear::{linear, linear_backward, LinearGrads, LinearParams};
pub use pool::{avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
