//! Evaluation: feature classifier, Fréchet distance of feature fits, label
//! accuracy, contact closeness and non-collision.

mod classifier;
mod frechet;
mod scores;

pub use classifier::{
    cross_entropy, pair_input, train_classifier, ClassifierConfig, ClassifierReport, ClassifierTrainConfig,
    FeatureClassifier, INPUT_DIM,
};
pub use frechet::{fit_gaussian, frechet_distance, GaussianStats};
pub use scores::{contact_score, non_collision_score, RegionStats};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParameterStore};
use crate::body::{forward_kinematics, BodyError, KinematicTree};
use crate::data::InteractionLabel;
use crate::guidance::GuidanceError;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("symmetric eigendecomposition did not converge")]
    Eigen,
    #[error("label {0} has no potential contact regions; rebuild the region statistics from a training set containing it")]
    NoPotentialRegions(InteractionLabel),
    #[error("invalid metrics configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
}

/// A pair to score: partner, interactive and the intended label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub partner: Vec<f64>,
    pub interactive: Vec<f64>,
    pub label: InteractionLabel,
}

impl EvalSample {
    pub fn input(&self) -> Vec<f64> {
        pair_input(&self.partner, &self.interactive)
    }
}

/// Fréchet distance between the feature fits of two sets of pairs.
pub fn fhid(net: &FeatureClassifier, store: &ParameterStore, generated: &[EvalSample], reference: &[EvalSample]) -> Result<f64, MetricsError> {
    let feats = |s: &[EvalSample]| net.features(store, &s.iter().map(EvalSample::input).collect::<Vec<_>>());
    frechet_distance(&fit_gaussian(&feats(generated)?)?, &fit_gaussian(&feats(reference)?)?)
}

/// Percentage of samples classified as their intended label.
pub fn top1_accuracy(net: &FeatureClassifier, store: &ParameterStore, samples: &[EvalSample]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("top-1 accuracy of no samples".into()));
    }
    let pred = net.predict(store, &samples.iter().map(EvalSample::input).collect::<Vec<_>>())?;
    let hits = pred.iter().zip(samples).filter(|(p, s)| **p == s.label.code()).count();
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub count: usize,
    /// Absent when either set has fewer than two samples of this label.
    pub fhid: Option<f64>,
    pub top1: Option<f64>,
    pub contact: Option<f64>,
    pub non_collision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn overall(&self) -> &MetricsRow {
        self.rows.last().expect("report always has the overall row")
    }

    /// Fixed-width table: label, count, FHID, top-1, contact, non-collision.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"));
        let mut out = format!("{:<14}{:>7}{:>12}{:>10}{:>12}{:>10}\n", "label", "n", "FHID", "top-1", "contact", "non-col");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14}{:>7}{:>12}{:>10}{:>12}{:>10}\n",
                r.label,
                r.count,
                cell(r.fhid, 4),
                cell(r.top1, 2),
                cell(r.contact, 6),
                cell(r.non_collision, 2)
            ));
        }
        out
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-label and overall FHID against `reference`, top-1, mean contact score
/// and mean non-collision of `generated`.
pub fn evaluate(
    tree: &KinematicTree,
    net: &FeatureClassifier,
    store: &ParameterStore,
    stats: &RegionStats,
    generated: &[EvalSample],
    reference: &[EvalSample],
) -> Result<MetricsReport, MetricsError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(MetricsError::Empty("evaluation needs generated and reference samples".into()));
    }
    let mut contact = Vec::with_capacity(generated.len());
    let mut noncol = Vec::with_capacity(generated.len());
    for s in generated {
        let h = forward_kinematics(tree, &s.interactive)?;
        let p = forward_kinematics(tree, &s.partner)?;
        contact.push(contact_score(&h, &p, &stats.potential(s.label)?)?);
        noncol.push(non_collision_score(&h, &p));
    }
    let row = |name: &str, keep: &dyn Fn(InteractionLabel) -> bool| -> Result<MetricsRow, MetricsError> {
        let idx: Vec<usize> = (0..generated.len()).filter(|&i| keep(generated[i].label)).collect();
        let gen: Vec<EvalSample> = idx.iter().map(|&i| generated[i].clone()).collect();
        let reference: Vec<EvalSample> = reference.iter().filter(|s| keep(s.label)).cloned().collect();
        let fhid = if gen.len() >= 2 && reference.len() >= 2 { Some(fhid(net, store, &gen, &reference)?) } else { None };
        let top1 = if gen.is_empty() { None } else { Some(top1_accuracy(net, store, &gen)?) };
        Ok(MetricsRow {
            label: name.to_string(),
            count: gen.len(),
            fhid,
            top1,
            contact: mean(&idx.iter().map(|&i| contact[i]).collect::<Vec<_>>()),
            non_collision: mean(&idx.iter().map(|&i| noncol[i]).collect::<Vec<_>>()),
        })
    };
    let mut rows = Vec::with_capacity(InteractionLabel::ALL.len() + 1);
    for l in InteractionLabel::ALL {
        rows.push(row(l.name(), &|x| x == l)?);
    }
    rows.push(row("All", &|_| true)?);
    Ok(MetricsReport { rows })
}
