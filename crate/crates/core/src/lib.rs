//! Multiple-degradation video super-resolution with a learned
//! pseudo-inverse of the image formation model.
//!
//! The crate is organised bottom-up:
//! - [`tensor`], [`layers`], [`optim`], [`gradcheck`]: dense arithmetic,
//!   differentiable primitives with hand-written backward passes, Adam.
//! - [`degradation`]: the blur + bicubic-downsampling operator `A`, its dense
//!   materialisation, an SVD pseudo-inverse oracle and the kernel bank / PCA.
//! - [`pinv`]: the learned convolutional pseudo-inverse and its hyper-network.
//! - [`network`]: generator (with the data-consistency projection) and discriminator.
//! - [`losses`], [`training`], [`metrics`]: objectives, training loops, PSNR/SSIM.
//! - [`io`]: raw tensor files, images, checkpoints and run configuration.
//! - [`pipeline`], [`checks`]: the command implementations behind the CLI and
//!   its built-in verification suites.

pub mod checks;
pub mod degradation;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pinv;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
