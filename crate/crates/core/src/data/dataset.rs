//! Dataset assembly, the binary blob plus JSON manifest, and self-checks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generator::{mirror_augment, GeneratorConfig, InteractionSample, SampleGenerator};
use super::{DataError, InteractionLabel};
use crate::autodiff::{read_tensors, tensors_to_bytes, Tensor};
use crate::body::{KinematicTree, PARAM_DIM};
use crate::contact::ContactMap;
use crate::diffusion::sample_rng;
use crate::io::{atomic_write, short_hash, write_json};

pub const BLOB_FILE: &str = "samples.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generated samples before augmentation.
    pub count: usize,
    /// Generated samples held out for testing; never augmented.
    pub test_count: usize,
    /// Append the mirror image of every training sample.
    pub augment: bool,
    pub seed: u64,
    /// Labels drawn uniformly per sample.
    pub labels: Vec<InteractionLabel>,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 4800,
            test_count: 800,
            augment: true,
            seed: 0,
            labels: InteractionLabel::ALL.to_vec(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        self.generator.validate()?;
        if self.count == 0 || self.test_count > self.count {
            return Err(DataError::Config(format!("need 0 < count and test_count <= count, got {}/{}", self.count, self.test_count)));
        }
        if self.labels.is_empty() {
            return Err(DataError::Config("at least one label is required".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<InteractionSample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &InteractionSample> {
        self.samples.iter().zip(&self.splits).filter(move |(_, s)| **s == which).map(|(x, _)| x)
    }

    pub fn histogram(&self) -> BTreeMap<String, usize> {
        let mut h: BTreeMap<String, usize> = InteractionLabel::ALL.iter().map(|l| (l.name().to_string(), 0)).collect();
        for s in &self.samples {
            *h.get_mut(s.label.name()).expect("every label is a key") += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub count: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub label_histogram: BTreeMap<String, usize>,
    pub config_hash: String,
    pub config: DataConfig,
    pub blob: String,
    pub blob_sha256: String,
    /// Row indices into the blob.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    /// Hash of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

/// Generates, normalizes, splits and optionally augments. Sample `i` uses its
/// own generator stream, so the result only depends on the config.
pub fn build_dataset(tree: &KinematicTree, cfg: &DataConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let gen = SampleGenerator::new(tree.clone(), cfg.generator)?;
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count as u64 {
        let mut rng = sample_rng(cfg.seed, i);
        let label = cfg.labels[rng.random_range(0..cfg.labels.len())];
        samples.push(gen.generate(label, &mut rng, cfg.seed, i)?);
        if (i + 1) % 500 == 0 {
            log::info!("generated {}/{} samples", i + 1, cfg.count);
        }
    }
    let mut order: Vec<usize> = (0..cfg.count).collect();
    order.shuffle(&mut sample_rng(cfg.seed, u64::MAX));
    let mut splits = vec![Split::Train; cfg.count];
    for &i in &order[..cfg.test_count] {
        splits[i] = Split::Test;
    }
    if cfg.augment {
        let mirrored: Vec<InteractionSample> =
            samples.iter().zip(&splits).filter(|(_, s)| **s == Split::Train).map(|(x, _)| mirror_augment(tree, x)).collect();
        splits.extend(std::iter::repeat_n(Split::Train, mirrored.len()));
        samples.extend(mirrored);
    }
    Ok(Dataset { samples, splits })
}

fn encode(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    let n = ds.len();
    let rows = |f: fn(&InteractionSample) -> &Vec<f64>| -> Result<Tensor, DataError> {
        Ok(Tensor::new(&[n, PARAM_DIM], ds.samples.iter().flat_map(|s| f(s).iter().copied()).collect())?)
    };
    let partner = rows(|s| &s.partner)?;
    let interactive = rows(|s| &s.interactive)?;
    let label = Tensor::vector(&ds.samples.iter().map(|s| s.label.code() as f64).collect::<Vec<_>>());
    let index = Tensor::vector(&ds.samples.iter().map(|s| s.index as f64).collect::<Vec<_>>());
    let mirrored = Tensor::vector(&ds.samples.iter().map(|s| f64::from(u8::from(s.mirrored))).collect::<Vec<_>>());
    let mut pairs = Vec::new();
    for (k, s) in ds.samples.iter().enumerate() {
        let r = s.contacts.regions;
        for (c, _) in s.contacts.values.iter().enumerate().filter(|(_, v)| **v != 0.0) {
            pairs.extend([k as f64, (c / r) as f64, (c % r) as f64]);
        }
    }
    let contacts = Tensor::new(&[pairs.len() / 3, 3], pairs)?;
    Ok(tensors_to_bytes([
        ("partner", &partner),
        ("interactive", &interactive),
        ("label", &label),
        ("index", &index),
        ("mirrored", &mirrored),
        ("contact_pairs", &contacts),
    ]))
}

fn manifest_for(ds: &Dataset, cfg: &DataConfig, blob: &[u8]) -> DatasetManifest {
    let rows = |w: Split| ds.splits.iter().enumerate().filter(|(_, s)| **s == w).map(|(i, _)| i).collect::<Vec<_>>();
    let (train, test) = (rows(Split::Train), rows(Split::Test));
    DatasetManifest {
        format_version: FORMAT_VERSION,
        count: ds.len(),
        train_count: train.len(),
        test_count: test.len(),
        label_histogram: ds.histogram(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        blob: BLOB_FILE.into(),
        blob_sha256: hex::encode(Sha256::digest(blob)),
        train,
        test,
    }
}

/// Writes `samples.bin` then `manifest.json` into `dir`, each atomically.
pub fn save_dataset(dir: &Path, ds: &Dataset, cfg: &DataConfig) -> Result<DatasetManifest, DataError> {
    if ds.samples.len() != ds.splits.len() {
        return Err(DataError::Format("one split entry per sample is required".into()));
    }
    let blob = encode(ds)?;
    let manifest = manifest_for(ds, cfg, &blob);
    atomic_write(&dir.join(BLOB_FILE), &blob)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn take(tensors: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor, DataError> {
    let t = tensors.remove(name).ok_or_else(|| DataError::Format(format!("blob lacks tensor {name:?}")))?;
    if shape.iter().enumerate().any(|(k, &d)| d != usize::MAX && t.shape().get(k) != Some(&d)) || t.rank() != shape.len() {
        return Err(DataError::Format(format!("tensor {name:?} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

fn as_index(v: f64, what: &str) -> Result<usize, DataError> {
    if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
        Ok(v as usize)
    } else {
        Err(DataError::Format(format!("{what} {v} is not a valid index")))
    }
}

/// Loads a dataset written by [`save_dataset`], checking the blob digest and
/// the structural invariants of the manifest.
pub fn load_dataset(dir: &Path, regions: usize) -> Result<(Dataset, DatasetManifest), DataError> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| DataError::Format(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::Format(format!("unsupported format version {}", manifest.format_version)));
    }
    let blob = std::fs::read(dir.join(&manifest.blob))?;
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.blob_sha256 {
        return Err(DataError::Format(format!("blob digest {digest} does not match manifest {}", manifest.blob_sha256)));
    }
    let mut tensors: BTreeMap<String, Tensor> = read_tensors(&blob[..])?.into_iter().collect();
    let n = manifest.count;
    let partner = take(&mut tensors, "partner", &[n, PARAM_DIM])?;
    let interactive = take(&mut tensors, "interactive", &[n, PARAM_DIM])?;
    let label = take(&mut tensors, "label", &[n])?;
    let index = take(&mut tensors, "index", &[n])?;
    let mirrored = take(&mut tensors, "mirrored", &[n])?;
    let pairs = take(&mut tensors, "contact_pairs", &[usize::MAX, 3])?;
    let mut maps = vec![ContactMap::zeros(regions); n];
    for row in pairs.data().chunks(3) {
        let (k, i, j) = (as_index(row[0], "sample")?, as_index(row[1], "region")?, as_index(row[2], "region")?);
        if k >= n || i >= regions || j >= regions {
            return Err(DataError::Format(format!("contact pair ({k}, {i}, {j}) out of range")));
        }
        maps[k].set(i, j, 1.0);
    }
    let mut samples = Vec::with_capacity(n);
    for (k, contacts) in maps.into_iter().enumerate() {
        let code = as_index(label.data()[k], "label")?;
        let label = InteractionLabel::from_code(code).ok_or_else(|| DataError::Format(format!("label code {code}")))?;
        samples.push(InteractionSample {
            partner: partner.row(k).to_vec(),
            interactive: interactive.row(k).to_vec(),
            label,
            contacts,
            seed: manifest.config.seed,
            index: as_index(index.data()[k], "index")? as u64,
            mirrored: mirrored.data()[k] != 0.0,
        });
    }
    let mut splits = vec![None; n];
    for (rows, which) in [(&manifest.train, Split::Train), (&manifest.test, Split::Test)] {
        for &r in rows {
            match splits.get_mut(r) {
                Some(slot @ None) => *slot = Some(which),
                Some(Some(_)) => return Err(DataError::Format(format!("row {r} is assigned to both splits"))),
                None => return Err(DataError::Format(format!("split row {r} out of range"))),
            }
        }
    }
    let splits = splits
        .into_iter()
        .enumerate()
        .map(|(r, s)| s.ok_or_else(|| DataError::Format(format!("row {r} has no split"))))
        .collect::<Result<Vec<_>, _>>()?;
    let ds = Dataset { samples, splits };
    if ds.histogram() != manifest.label_histogram {
        return Err(DataError::Format("label histogram does not match the samples".into()));
    }
    Ok((ds, manifest))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub count: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub contact_pairs: usize,
    /// One line per sample whose stored contacts disagree with geometry.
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Reloads a dataset and recomputes every sample's ground-truth contacts.
pub fn validate_dataset(dir: &Path, tree: &KinematicTree) -> Result<ValidationReport, DataError> {
    let (ds, manifest) = load_dataset(dir, tree.num_regions())?;
    let gen = SampleGenerator::new(tree.clone(), manifest.config.generator)?;
    let mut report = ValidationReport {
        count: ds.len(),
        train_count: manifest.train_count,
        test_count: manifest.test_count,
        ..ValidationReport::default()
    };
    let train: BTreeSet<usize> = manifest.train.iter().copied().collect();
    if manifest.test.iter().any(|r| train.contains(r)) || train.len() + manifest.test.len() != ds.len() {
        report.failures.push("train and test rows overlap or do not cover the dataset".into());
    }
    for (row, s) in ds.samples.iter().enumerate() {
        report.contact_pairs += s.contacts.count_nonzero();
        let truth = gen.contacts(&s.partner, &s.interactive)?;
        if s.contacts.count_nonzero() == 0 {
            report.failures.push(format!("row {row}: no contact"));
        } else if truth != s.contacts {
            report.failures.push(format!("row {row}: stored contacts differ from geometry"));
        }
    }
    Ok(report)
}
