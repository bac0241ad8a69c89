//! The learned pseudo-inverse of `A` and the network that predicts it from a
//! blur kernel.

pub mod hypernet;
pub mod learned;

pub use hypernet::{
    hypernet_mse, hypernet_predict, train_hypernet, HyperNetwork, HypernetTrainConfig, HypernetTrainResult, PinvShape,
    DESK_HIDDEN, PAPER_HIDDEN,
};
pub use learned::{
    best_so_far, default_kernel_size, identity_residual, pinv_apply, pinv_loss, pinv_loss_grad, pinv_loss_lr,
    pinv_residuals, train_pinv, train_pinv_from, LearnedPseudoInverse, PinvResiduals, PinvTrainConfig, PinvTrainResult,
    PseudoInverse,
};
