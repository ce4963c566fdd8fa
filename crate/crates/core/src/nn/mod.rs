//! Tensor engine and the UNet model family.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod real;
pub mod spec;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingStats};
pub use model::{Gradients, Mode, Model, Param};
pub use real::Real;
pub use spec::{LayerKind, LayerSpec, ModelSpec};
pub use tensor::Tensor;
