//! Label post-processing and segmentation metrics.

mod driver;
mod knn;
mod metrics;
mod vote;

pub use driver::{config_hash, evaluate, evaluate_with, EvalOptions, EvalReport};
pub use knn::{knn_backproject, pixel_lookup, KnnConfig};
pub use metrics::{ConfusionMatrix, IouReport};
pub use vote::{majority_vote_baseline, LabelledFrame};
