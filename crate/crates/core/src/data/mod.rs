//! Synthetic interacting pose pairs: labels, per-label contact recipes,
//! normalization, mirror augmentation and dataset files.

mod dataset;
mod generator;
mod labels;

pub use dataset::{
    build_dataset, load_dataset, save_dataset, validate_dataset, DataConfig, Dataset, DatasetManifest, Split,
    ValidationReport, BLOB_FILE, MANIFEST_FILE,
};
pub use generator::{
    mirror_augment, normalize_partner, recipe_pairs, GeneratorConfig, InteractionSample, SampleGenerator,
};
pub use labels::{InteractionLabel, NUM_LABELS};

use crate::autodiff::AutodiffError;
use crate::body::BodyError;
use crate::contact::ContactError;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("could not construct a {label} sample after {attempts} attempts: {reason}")]
    Construction { label: InteractionLabel, attempts: usize, reason: String },
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
