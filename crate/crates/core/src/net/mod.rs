//! The fusion network: patch embeddings, per-modality encoders, a multi-target
//! decoder over the fused memory, slot pooling, a GRU and actor/critic heads.

mod config;
mod importance;
pub mod layers;
mod model;
mod prep;

pub use config::{AblationFlags, ModelConfig};
pub use importance::modality_importance;
pub use model::{
    fuse_concat, AttentionCapture, DmtfNet, Encoded, ObsBatch, StepOutput, MODALITIES,
};
pub use prep::prep_audio;

use crate::ndgrad::GradError;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}
