use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::predictor::bce_on_tape;
use super::{ContactError, ContactInput, ContactMap, ContactPredictor};
use crate::autodiff::{ParameterStore, Tape, Tensor};

/// Predictor input with its geometric ground-truth map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactExample {
    pub input: ContactInput,
    pub target: ContactMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step; cosine decay from `lr`.
    pub lr_final: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for ContactTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 32, lr: 1e-3, lr_final: 1e-4, seed: 0, log_every: 100 }
    }
}

impl ContactTrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        crate::nn::cosine_lr(self.lr, self.lr_final, step, self.steps)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactTrainReport {
    pub losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Minibatch Adam on the mean clamped binary cross-entropy.
pub fn train_contact_predictor(
    net: &ContactPredictor,
    store: &mut ParameterStore,
    data: &[ContactExample],
    cfg: &ContactTrainConfig,
) -> Result<ContactTrainReport, ContactError> {
    net.config.validate()?;
    if data.is_empty() {
        return Err(ContactError::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.log_every == 0 || !(cfg.lr > 0.0 && cfg.lr_final > 0.0) {
        return Err(ContactError::Config("batch_size, log_every and learning rates must be positive".into()));
    }
    let n = net.regions;
    if let Some(bad) = data.iter().find(|e| e.target.regions != n) {
        return Err(ContactError::RegionCount(n, bad.target.regions));
    }
    net.check_store(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = ContactTrainReport::default();
    let mut block = Vec::new();
    for step in 0..cfg.steps {
        let picks: Vec<&ContactExample> = (0..cfg.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let inputs: Vec<ContactInput> = picks.iter().map(|e| e.input.clone()).collect();
        let target: Vec<f64> = picks.iter().flat_map(|e| e.target.values.iter().copied()).collect();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let probs = net.forward(&tape, &bound, &inputs)?;
        let loss = bce_on_tape(probs, tape.constant(Tensor::new(&[cfg.batch_size, n, n], target)?))?;
        let value = loss.item()?;
        let grads = tape.backward(loss)?;
        store.accumulate(&bound, &grads);
        drop(bound);
        store.adam_step(cfg.lr_at(step));
        report.losses.push(value);
        block.push(value);
        if block.len() == cfg.log_every || step + 1 == cfg.steps {
            let mean = block.iter().sum::<f64>() / block.len() as f64;
            log::info!("contact step {} loss {mean:.5}", step + 1);
            report.epoch_losses.push(mean);
            block.clear();
        }
    }
    Ok(report)
}
