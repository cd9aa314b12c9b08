//! Dense tensors with tape-based reverse-mode differentiation and Adam.

mod adam;
pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use params::{fan_in, uniform, ParamStore};
pub use tape::{AttnLayout, PatchGeometry, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("training error: {0}")]
    Training(String),
}

/// Row-wise softmax of a plain tensor, outside any tape.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor, GradError> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.softmax(v)?;
    Ok(t.value(y).clone())
}

/// `a · b` outside any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, GradError> {
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(av, bv)?;
    Ok(t.value(c).clone())
}

/// Layer normalization over the last dimension, outside any tape.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, GradError> {
    let mut t = Tape::new();
    let (xv, g, b) = (t.constant(x.clone()), t.constant(gain.clone()), t.constant(bias.clone()));
    let y = t.layer_norm(xv, g, b, eps)?;
    Ok(t.value(y).clone())
}
