//! Noise schedule, forward noising, the denoiser training loop and guided
//! deterministic sampling.

mod sample;
mod schedule;
mod train;

pub use sample::{apply_guidance, sample_rng, sample_batch, Guide, SampleOptions, SampleOutput};
pub use schedule::{training_loss, DiffusionConfig, NoiseSchedule};
pub use train::{train_denoiser, TrainConfig, TrainReport, TrainingTriple};

use crate::autodiff::AutodiffError;
use crate::body::BodyError;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid diffusion configuration: {0}")]
    Config(String),
    #[error("time step {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("guidance failed: {0}")]
    Guidance(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Body(#[from] BodyError),
}
