//! Dense tensors with hand-written reverse passes, the layers of the
//! encoder and its heads, Adam, and checkpointing.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

pub use checkpoint::{CheckpointKind, CheckpointManifest, ModelState};
pub use layers::{Layer, Sequential};
pub use model::{BackboneConfig, Model, ModelConfig, PoolKind};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use tensor::{Scalar, Tensor};
