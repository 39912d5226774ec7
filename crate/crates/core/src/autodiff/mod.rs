//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every op of one forward pass together with its local
//! backward rule; [`Tape::backward`] sweeps it in reverse. Networks keep their
//! weights in a [`ParameterStore`], bind them onto a fresh tape per pass, and
//! fold the resulting gradients back before an Adam step.

mod checkpoint;
pub mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

#[cfg(test)]
mod op_tests;

pub use checkpoint::{
    load_checkpoint, read_tensors, save_checkpoint, sidecar_path, tensors_to_bytes, write_tensors,
};
pub use ops::{concat, sq_dist};
pub use params::{AdamConfig, Bound, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    MissingParameter(String),
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
