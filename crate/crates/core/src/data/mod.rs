//! Dataset ingestion, label mappings and the synthetic scene generator.

pub mod kitti;
pub mod manifest;
pub mod mapping;
pub mod synthetic;
pub mod toy;

pub use kitti::{
    read_labels, read_poses, read_raw_labels, read_scan, write_labels, write_poses, write_scan,
};
pub use manifest::{
    load_sequence, read_sensor_config, write_sequence, Frame, FrameRecord, Sequence,
    SequenceManifest,
};
pub use mapping::{ClassMapping, MappingEntry};
pub use synthetic::{
    generate_synthetic, BoxSpec, EgoSpec, GroundSpec, SyntheticFrame, SyntheticSceneSpec,
};
pub use toy::{toy_dataset, toy_scene, ToySceneConfig};
