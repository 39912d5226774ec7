use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DiffusionError, NoiseSchedule};
use crate::autodiff::{ParameterStore, Tape, Tensor};
use crate::body::{PARAM_DIM, SEGMENTS};
use crate::denoiser::{CondMask, DenoiseBatch, Denoiser};

/// One training example: interactive body, partner, label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub x0: Vec<f64>,
    pub partner: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step; cosine decay from `lr`.
    pub lr_final: f64,
    pub seed: u64,
    /// Steps per logged epoch mean.
    pub log_every: usize,
    /// Checkpoint callback period in steps, 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 6000, batch_size: 64, lr: 1e-3, lr_final: 1e-4, seed: 0, log_every: 200, checkpoint_every: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(DiffusionError::Config("batch_size and log_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.lr.is_finite() && self.lr_final.is_finite()) {
            return Err(DiffusionError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        crate::nn::cosine_lr(self.lr, self.lr_final, step, self.steps)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    /// Mean loss over each block of `log_every` steps.
    pub epoch_losses: Vec<f64>,
    /// Condition draws in total and how many hid the partner or both.
    pub draws: usize,
    pub partner_hidden: usize,
    pub both_hidden: usize,
}

/// Per-coordinate weights `1/N_seg`, so that summing weighted squares over a
/// row gives the segment-split loss.
fn segment_weights() -> Tensor {
    let mut w = vec![0.0; PARAM_DIM];
    for seg in SEGMENTS {
        let n = seg.len() as f64;
        w[seg].iter_mut().for_each(|v| *v = 1.0 / n);
    }
    Tensor::vector(&w)
}

/// Minibatch Adam on the segment-split noise regression loss with condition
/// dropout. `on_checkpoint(step, store)` runs every `checkpoint_every` steps.
pub fn train_denoiser(
    denoiser: &Denoiser,
    store: &mut ParameterStore,
    sched: &NoiseSchedule,
    data: &[TrainingTriple],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &ParameterStore) -> Result<(), DiffusionError>,
) -> Result<TrainReport, DiffusionError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    for d in data {
        for v in [&d.x0, &d.partner] {
            if v.len() != PARAM_DIM {
                return Err(DiffusionError::Dimension { expected: PARAM_DIM, got: v.len() });
            }
        }
    }
    denoiser.check_store(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = segment_weights();
    let b = cfg.batch_size;
    let mut report = TrainReport::default();
    let mut block = Vec::new();
    for step in 0..cfg.steps {
        let mut x_t = Vec::with_capacity(b * PARAM_DIM);
        let mut partners = Vec::with_capacity(b * PARAM_DIM);
        let mut eps_all = Vec::with_capacity(b * PARAM_DIM);
        let (mut ts, mut labels, mut masks) = (Vec::with_capacity(b), Vec::with_capacity(b), Vec::with_capacity(b));
        for _ in 0..b {
            let d = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=sched.steps());
            let eps: Vec<f64> = (0..PARAM_DIM).map(|_| rng.sample(StandardNormal)).collect();
            x_t.extend(sched.q_sample(&d.x0, t, &eps)?);
            eps_all.extend(eps);
            partners.extend_from_slice(&d.partner);
            let m = CondMask::sample(&denoiser.config, &mut rng);
            report.draws += 1;
            report.partner_hidden += usize::from(m == CondMask::LABEL_ONLY);
            report.both_hidden += usize::from(m == CondMask::NONE);
            ts.push(t);
            labels.push(d.label);
            masks.push(m);
        }
        let x_t = Tensor::new(&[b, PARAM_DIM], x_t)?;
        let partners = Tensor::new(&[b, PARAM_DIM], partners)?;
        let eps = Tensor::new(&[b, PARAM_DIM], eps_all)?;

        let tape = Tape::new();
        let bound = store.bind(&tape);
        let batch = DenoiseBatch { x_t: &x_t, t: &ts, partners: &partners, labels: &labels, masks: &masks };
        let pred = denoiser.forward(&tape, &bound, &batch)?;
        let loss = pred
            .sub(tape.constant(eps))?
            .square()
            .mul(tape.constant(weights.clone()))?
            .sum_axis(1)?
            .mean();
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(DiffusionError::Config(format!("training diverged at step {step}: loss {value}")));
        }
        let grads = tape.backward(loss)?;
        store.accumulate(&bound, &grads);
        drop(bound);
        store.adam_step(cfg.lr_at(step));

        report.losses.push(value);
        block.push(value);
        if block.len() == cfg.log_every || step + 1 == cfg.steps {
            let mean = block.iter().sum::<f64>() / block.len() as f64;
            log::info!("denoiser step {} loss {mean:.5}", step + 1);
            report.epoch_losses.push(mean);
            block.clear();
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, store)?;
        }
    }
    Ok(report)
}
