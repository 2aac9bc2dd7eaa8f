//! Training, sliding-patch inference, anomaly maps and post-processing.

mod inference;
mod postprocess;
mod train;

pub use inference::{ddpm_reconstruct_slice, reconstruct_slice, reconstruct_volume, slice_noise};
pub use postprocess::{
    anomaly_map, baseline_thresh, binarize_and_prune, erode, greedy_threshold_search, mean_dice_at,
    median_filter, postprocess, prune_components, threshold_candidates, AnomalyMap, ThresholdSearch,
};
pub use train::{
    ddpm_train_step, train, validation_loss, LossMode, TrainConfig, TrainOutcome, TrainRecord, Trainer,
};

/// Median kernel size of the post-processing chain.
pub const MEDIAN_KERNEL: usize = 5;
/// Brain-mask erosion iterations of the post-processing chain.
pub const EROSION_ITERATIONS: usize = 3;
/// Components smaller than this many voxels are discarded.
pub const MIN_COMPONENT: usize = 7;
/// Threshold candidates evaluated by the greedy search.
pub const THRESHOLD_CANDIDATES: usize = 100;
