//! Minimal deterministic neural-network engine.

pub mod adam;
pub mod arch;
pub mod checkpoint;
pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use arch::{ArchDescriptor, ArchRegistry, InputShape, LayerSpec};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use gradcheck::{grad_check, GradCheckReport};
pub use network::Network;
pub use tensor::Tensor;
pub use train::{fit, Example, TrainOptions};
