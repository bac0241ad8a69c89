//! The image formation model `y = A x`, `A = bicubic↓f ∘ (· ⊗ k)`.

pub mod dense;
pub mod kernel;
pub mod operator;
pub mod pca;
pub mod resample;

pub use dense::{materialize_a, materialize_columns, pinv_oracle, DenseOperator};
pub use kernel::{
    auto_size, bank_kernel, bank_sigmas, bank_support, gaussian_kernel, kernel_bank, sigma_range, GaussianKernel,
};
pub use operator::{apply_a, DegradationOperator};
pub use pca::{pca_fit, pca_project, KernelPca, DEFAULT_PCA_DIM};
pub use resample::{bicubic_downsample, bicubic_upsample};
