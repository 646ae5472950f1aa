//! Reverse-mode autodiff, patch-sequence transformers (Model S and
//! Model ST) and their two-stage training loop.
//!
//! Everything here is `f64`; gradient checks need the precision.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod trainer;
pub mod transformer;

pub use autodiff::{Gradients, Init, Matrix, NodeId, ParamId, ParamStore, Tape};
pub use checkpoint::{load_checkpoint, params_hash, save_checkpoint, Checkpoint};
pub use dataset::{Dataset, PatchPair};
pub use error::{NnError, Result};
pub use trainer::{train_model_s, train_model_st, Adam, StopReason, TrainConfig, TrainLog};
pub use transformer::{
    extract_patches, predict_volume, reassemble, AttentionMode, ModelConfig, ModelS, ModelST, PatchSequence,
    TensorModel,
};
