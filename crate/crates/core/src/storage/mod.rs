//! On-disk formats: tensors, dataset manifests, checkpoints and run
//! configuration.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{apply_overrides, PipelineConfig};
pub use manifest::{load_manifest, DatasetManifest, ParticipantEntry, RecordingEntry, Split};
pub use tensor::{read_tensor, write_tensor, DType, TensorData, TensorFile};
