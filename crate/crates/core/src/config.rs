//! The run configuration document shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::body::{KinematicTree, SamplingConfig, SkeletonSpec};
use crate::contact::{ContactConfig, ContactTrainConfig};
use crate::data::DataConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{DiffusionConfig, SampleOptions, TrainConfig};
use crate::guidance::GuidanceConfig;
use crate::io::short_hash;
use crate::metrics::{ClassifierConfig, ClassifierTrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodyConfig {
    pub skeleton: SkeletonSpec,
    pub sampling: SamplingConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworksConfig {
    pub denoiser: DenoiserConfig,
    pub contact: ContactConfig,
    pub classifier: ClassifierConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub denoiser: TrainConfig,
    pub contact: ContactTrainConfig,
    pub classifier: ClassifierTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Minimum per-label contact frequency of a potential contact pair.
    pub frequency_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { frequency_threshold: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root for every artifact; `PAIRPOSE_OUT` overrides it.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs/default") }
    }
}

/// Environment variable that overrides `paths.out_dir`.
pub const OUT_DIR_ENV: &str = "PAIRPOSE_OUT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub body: BodyConfig,
    pub diffusion: DiffusionConfig,
    pub networks: NetworksConfig,
    pub training: TrainingConfig,
    pub guidance: GuidanceConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.tree()?;
        self.diffusion.validate().map_err(|e| bad(&e))?;
        self.networks.denoiser.validate().map_err(|e| bad(&e))?;
        self.networks.contact.validate().map_err(|e| bad(&e))?;
        self.networks.classifier.validate().map_err(|e| bad(&e))?;
        self.training.denoiser.validate().map_err(|e| bad(&e))?;
        self.guidance.validate().map_err(|e| bad(&e))?;
        self.data.validate().map_err(|e| bad(&e))?;
        let f = self.metrics.frequency_threshold;
        if !(f > 0.0 && f <= 1.0) {
            return Err(ConfigError::Invalid(format!("metrics.frequency_threshold must be in (0, 1], got {f}")));
        }
        Ok(())
    }

    pub fn tree(&self) -> Result<KinematicTree, ConfigError> {
        KinematicTree::new(&self.body.skeleton, self.body.sampling).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Short digest of the canonical JSON form, embedded in every artifact.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// `paths.out_dir`, or the environment override when set.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.paths.out_dir.clone(),
        }
    }

    pub fn sample_options(&self, seed: u64) -> SampleOptions {
        SampleOptions {
            scale_partner: self.networks.denoiser.scale_partner,
            scale_label: self.networks.denoiser.scale_label,
            lambda: self.guidance.lambda,
            inner_iters: self.guidance.inner_iters,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_and_validates() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#), Err(ConfigError::Parse(_))));
        assert!(RunConfig::from_json(r#"{"diffusion": {"steps": 10, "extra": 0}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"diffusion": {"steps": 10, "stride": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"guidance": {"lambda": [-1, 0, 0, 0]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"metrics": {"frequency_threshold": 0}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let mut cfg = RunConfig::default();
        let h = cfg.hash();
        cfg.data.seed = 1;
        assert_ne!(cfg.hash(), h);
    }
}
