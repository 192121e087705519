//! Synthetic multi-task scenes, batching, dataset directories and
//! checkpoints.

mod batch;
pub mod checkpoint;
mod export;
mod scene;

pub use batch::{stack_images, targets, Targets};
pub use checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint};
pub use export::{decode_sample, encode_sample, export_dataset, load_dataset, DatasetManifest};
pub use scene::{
    boundary, generate_dataset, generate_sample, sample_seed, shape_classes, Labels, MultiTaskSample, SceneConfig,
    ShapeKind, PARTS_CLASSES, SEMSEG_CLASSES, SHAPE_CLASSES,
};
