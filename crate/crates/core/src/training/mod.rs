//! Training: augmentation, class weighting, optimisation and the
//! truncated-BPTT update schedule.

mod augment;
mod experiment;
mod optim;
mod schedule;
mod trainer;

pub use augment::{
    draw_augmentation, flip_frame, mirror_pose, pixel_targets, prepare_frames, AugmentConfig,
    Augmentation, Crop, PreparedFrame,
};
pub use experiment::{median, ToyComparison, ToyExperiment};
pub use optim::{compute_class_weights, Adam, ClassWeights, OptimizerConfig};
pub use schedule::{tbptt_schedule, TbpttConfig, Update};
pub use trainer::{default_optimizer, TrainConfig, Trainer, UpdateRecord, LOG_HEADER};
