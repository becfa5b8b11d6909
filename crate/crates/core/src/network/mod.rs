//! Segmentation network: multi-scale backbone, recurrent memory update and
//! per-pixel classifier.

pub mod backbone;
pub mod layers;
pub mod memory;
pub mod model;

pub use backbone::{Backbone, BackboneConfig};
pub use memory::{ConvGru, GruStep, MemoryModule, MemoryUpdateKind, ResidualMemory, MEMORY_UNITS};
pub use model::{
    argmax_channels, image_tensor, parameter_breakdown, FrameInput, InputNorm, Model, ModelConfig,
    ModelState, Prediction, StepOptions, StepOutput,
};
