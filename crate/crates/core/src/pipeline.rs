//! End-to-end helpers shared by the command line and the acceptance suite:
//! dataset views for each trainer, model bundles, and batched generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, ParameterStore};
use crate::body::{forward_kinematics, BodyError, KinematicTree};
use crate::config::{ConfigError, RunConfig};
use crate::contact::{
    threshold_contacts, train_contact_predictor, ContactError, ContactExample, ContactInput, ContactPredictor,
    ContactTrainReport, DetectionScore,
};
use crate::data::{DataError, InteractionSample};
use crate::denoiser::Denoiser;
use crate::diffusion::{sample_batch, train_denoiser, DiffusionError, SampleOutput, TrainReport, TrainingTriple};
use crate::guidance::{ContactGuide, GuidanceError};
use crate::metrics::{
    train_classifier, ClassifierReport, EvalSample, FeatureClassifier, MetricsError, RegionStats,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

/// Fails when a training run ended on a non-finite loss.
pub fn check_finite_losses(what: &str, losses: &[f64]) -> Result<(), PipelineError> {
    match losses.iter().position(|l| !l.is_finite()) {
        Some(step) => Err(PipelineError::NonFinite(format!("{what} loss diverged at step {}", step + 1))),
        None => Ok(()),
    }
}

pub fn training_triples<'a>(samples: impl IntoIterator<Item = &'a InteractionSample>) -> Vec<TrainingTriple> {
    samples
        .into_iter()
        .map(|s| TrainingTriple { x0: s.interactive.clone(), partner: s.partner.clone(), label: s.label.code() })
        .collect()
}

pub fn contact_examples<'a>(
    tree: &KinematicTree,
    samples: impl IntoIterator<Item = &'a InteractionSample>,
) -> Result<Vec<ContactExample>, PipelineError> {
    samples
        .into_iter()
        .map(|s| {
            let h = forward_kinematics(tree, &s.interactive)?;
            let p = forward_kinematics(tree, &s.partner)?;
            Ok(ContactExample { input: ContactInput::from_bodies(&h, &p, s.label.code())?, target: s.contacts.clone() })
        })
        .collect()
}

pub fn classifier_data<'a>(samples: impl IntoIterator<Item = &'a InteractionSample>) -> Vec<(Vec<f64>, usize)> {
    samples.into_iter().map(|s| (crate::metrics::pair_input(&s.partner, &s.interactive), s.label.code())).collect()
}

pub fn eval_samples<'a>(samples: impl IntoIterator<Item = &'a InteractionSample>) -> Vec<EvalSample> {
    samples
        .into_iter()
        .map(|s| EvalSample { partner: s.partner.clone(), interactive: s.interactive.clone(), label: s.label })
        .collect()
}

/// Pair-level detection counts of thresholded predictions against the stored
/// ground truth.
pub fn contact_detection(
    predictor: &ContactPredictor,
    store: &ParameterStore,
    examples: &[ContactExample],
    tau: f64,
) -> Result<DetectionScore, PipelineError> {
    let mut score = DetectionScore::default();
    for chunk in examples.chunks(64) {
        let inputs: Vec<ContactInput> = chunk.iter().map(|e| e.input.clone()).collect();
        for (map, e) in predictor.predict(store, &inputs)?.iter().zip(chunk) {
            score.add(&threshold_contacts(map, tau)?, &e.target);
        }
    }
    Ok(score)
}

pub fn train_denoiser_from(
    cfg: &RunConfig,
    train: &[TrainingTriple],
    on_checkpoint: impl FnMut(usize, &ParameterStore) -> Result<(), DiffusionError>,
) -> Result<(Denoiser, ParameterStore, TrainReport), PipelineError> {
    let net = Denoiser::new(cfg.networks.denoiser);
    let mut store = net.init(&mut ChaCha8Rng::seed_from_u64(cfg.training.denoiser.seed));
    let sched = cfg.diffusion.schedule()?;
    let report = train_denoiser(&net, &mut store, &sched, train, &cfg.training.denoiser, on_checkpoint)?;
    Ok((net, store, report))
}

pub fn train_contact_from(
    cfg: &RunConfig,
    tree: &KinematicTree,
    train: &[ContactExample],
) -> Result<(ContactPredictor, ParameterStore, ContactTrainReport), PipelineError> {
    let net = ContactPredictor::new(cfg.networks.contact, tree.num_regions());
    let mut store = net.init(&mut ChaCha8Rng::seed_from_u64(cfg.training.contact.seed));
    let report = train_contact_predictor(&net, &mut store, train, &cfg.training.contact)?;
    Ok((net, store, report))
}

pub fn train_classifier_from(
    cfg: &RunConfig,
    train: &[(Vec<f64>, usize)],
) -> Result<(FeatureClassifier, ParameterStore, ClassifierReport), PipelineError> {
    let net = FeatureClassifier::new(cfg.networks.classifier);
    let mut store = net.init(&mut ChaCha8Rng::seed_from_u64(cfg.training.classifier.seed));
    let report = train_classifier(&net, &mut store, train, &cfg.training.classifier)?;
    Ok((net, store, report))
}

pub fn region_stats<'a>(
    cfg: &RunConfig,
    tree: &KinematicTree,
    train: impl IntoIterator<Item = &'a InteractionSample>,
) -> Result<RegionStats, PipelineError> {
    Ok(RegionStats::build(train, tree.num_regions(), cfg.metrics.frequency_threshold)?)
}

/// Trained generator: the denoiser plus, for guided sampling, the contact
/// predictor.
pub struct Generator<'a> {
    pub cfg: &'a RunConfig,
    pub tree: &'a KinematicTree,
    pub denoiser: &'a Denoiser,
    pub denoiser_store: &'a ParameterStore,
    pub contact: Option<(&'a ContactPredictor, &'a ParameterStore)>,
}

impl Generator<'_> {
    /// Samples one interactive body per `(partner, label)`; sample `i` draws
    /// its noise from stream `first_index + i` of `seed`. Guidance is applied
    /// when a contact predictor is present.
    pub fn generate(
        &self,
        partners: &[Vec<f64>],
        labels: &[usize],
        first_index: u64,
        seed: u64,
        batch: usize,
    ) -> Result<SampleOutput, PipelineError> {
        let sched = self.cfg.diffusion.schedule()?;
        let steps = self.cfg.diffusion.timesteps();
        let opts = self.cfg.sample_options(seed);
        let guide = self.contact.map(|(net, store)| ContactGuide::new(self.tree, net, store, self.cfg.networks.contact.tau));
        let mut out = SampleOutput { samples: Vec::new(), guidance_evals: Vec::new() };
        let batch = batch.max(1);
        for (k, (ps, ls)) in partners.chunks(batch).zip(labels.chunks(batch)).enumerate() {
            let first = first_index + (k * batch) as u64;
            let part = sample_batch(
                self.denoiser,
                self.denoiser_store,
                &sched,
                &steps,
                ps,
                ls,
                first,
                guide.as_ref().map(|g| g as &dyn crate::diffusion::Guide),
                &opts,
            )?;
            out.samples.extend(part.samples);
            out.guidance_evals.extend(part.guidance_evals);
        }
        if labels.len() != partners.len() {
            return Err(DiffusionError::Dimension { expected: partners.len(), got: labels.len() }.into());
        }
        Ok(out)
    }
}
