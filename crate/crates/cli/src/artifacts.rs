//! On-disk layout and file formats produced by the commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use pairpose::autodiff::{load_checkpoint, save_checkpoint, ParameterStore};
use pairpose::data::InteractionLabel;
use pairpose::io::short_hash;

use crate::error::{CliError, CliResult};

/// Default artifact locations under the output root.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn model(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{}.bin", kind.name()))
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples").join("samples.json")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn export(&self) -> PathBuf {
        self.root.join("export")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Denoiser,
    Contact,
    Classifier,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Denoiser => "denoiser",
            ModelKind::Contact => "contact",
            ModelKind::Classifier => "classifier",
        }
    }
}

/// JSON sidecar of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub kind: String,
    pub config_hash: String,
    /// Network hyperparameters the weights belong to.
    pub network: Value,
    /// Schedule the denoiser was trained under; empty for the other models.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub diffusion: Value,
    pub training: Value,
    pub dataset_manifest: String,
    /// Optimizer steps completed.
    pub step: usize,
    pub summary: Value,
}

pub fn save_model(path: &Path, store: &ParameterStore, meta: &ModelMeta) -> CliResult<()> {
    save_checkpoint(path, store, &serde_json::to_value(meta)?)?;
    Ok(())
}

/// Loads a checkpoint and checks that it was trained with `network` (and, for
/// the denoiser, `diffusion`).
pub fn load_model(path: &Path, kind: ModelKind, network: &Value, diffusion: Option<&Value>) -> CliResult<(ParameterStore, ModelMeta)> {
    if !path.exists() {
        return Err(CliError::validation(format!(
            "no {} checkpoint at {}; run train-{} first",
            kind.name(),
            path.display(),
            if kind == ModelKind::Denoiser { "diffusion" } else { kind.name() }
        )));
    }
    let (store, meta) = load_checkpoint(path)?;
    let meta: ModelMeta = serde_json::from_value(meta)?;
    if meta.kind != kind.name() {
        return Err(CliError::validation(format!("{} holds a {} model, expected {}", path.display(), meta.kind, kind.name())));
    }
    if architecture(&meta.network) != architecture(network) {
        return Err(CliError::validation(format!("{} was trained with a different {} network configuration", path.display(), kind.name())));
    }
    if let Some(d) = diffusion {
        if &meta.diffusion != d {
            return Err(CliError::validation(format!("{} was trained with a different noise schedule", path.display())));
        }
    }
    Ok((store, meta))
}

/// Network settings minus the contact threshold, which only affects how
/// predictions are read and may be changed after training.
fn architecture(network: &Value) -> Value {
    let mut v = network.clone();
    if let Some(m) = v.as_object_mut() {
        m.remove("tau");
    }
    v
}

/// Digest of a file's bytes, for provenance.
pub fn file_hash(path: &Path) -> CliResult<String> {
    Ok(short_hash(&std::fs::read(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedSample {
    /// Noise stream index.
    pub index: u64,
    pub label: InteractionLabel,
    /// Dataset row the partner was taken from.
    pub source_row: usize,
    pub partner: Vec<f64>,
    pub interactive: Vec<f64>,
    pub guidance_evals: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSet {
    pub config_hash: String,
    pub denoiser: String,
    /// Contact checkpoint digest when guided.
    pub contact: Option<String>,
    pub seed: u64,
    pub guided: bool,
    pub lambda: [f64; 4],
    pub inner_iters: usize,
    pub tau: f64,
    pub stride: usize,
    pub samples: Vec<GeneratedSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportedBody {
    pub params: Vec<f64>,
    /// Joints, vertices and region ids.
    pub mesh: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMetrics {
    pub contact_score: f64,
    pub non_collision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportedSample {
    pub config_hash: String,
    pub index: u64,
    pub label: InteractionLabel,
    pub partner: ExportedBody,
    pub interactive: ExportedBody,
    /// Thresholded predicted contact pairs (interactive region, partner region).
    pub contact_pairs: Vec<(usize, usize)>,
    pub metrics: SampleMetrics,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}
