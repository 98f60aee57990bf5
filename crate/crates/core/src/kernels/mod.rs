//! Reference kernels for the training objectives and the gated cross-task
//! attention block.
//!
//! Every loss returns its value together with the analytic gradient, and
//! [`finite_difference_check`] compares the two. Reductions go through a
//! fixed pairwise summation tree.

mod attention;
mod gradcheck;
mod losses;
mod skeleton;
mod tensor;

pub use attention::{gated_attention_backward, gated_attention_forward, AttentionGrads, AttentionOutput, AttentionWeights};
pub use gradcheck::{finite_difference_check, finite_difference_check_filtered, FdReport, FdScheme};
pub use losses::{
    deep_supervision_aggregate, exclusion_loss, total_loss, tversky_loss, ExclusionLoss, TotalLoss, TverskyParams,
    UncertaintyState, DEFAULT_DEEP_SUPERVISION_WEIGHTS, DEFAULT_EPSILON, DEFAULT_LAMBDA_EXCL,
};
pub use skeleton::{cldice_loss, soft_dilate, soft_erode, soft_skeleton, SkeletonTape, DEFAULT_SKELETON_ITERATIONS};
pub use tensor::Tensor4D;
