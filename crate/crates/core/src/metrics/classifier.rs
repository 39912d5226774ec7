//! MLP label classifier whose penultimate activations serve as interaction
//! features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::autodiff::{AutodiffError, Bound, ParameterStore, Tape, Tensor, Var};
use crate::body::PARAM_DIM;
use crate::data::NUM_LABELS;
use crate::nn::{cosine_lr, Linear};

/// Classifier input: partner parameters followed by interactive parameters.
pub const INPUT_DIM: usize = 2 * PARAM_DIM;

pub fn pair_input(partner: &[f64], interactive: &[f64]) -> Vec<f64> {
    partner.iter().chain(interactive).copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub feature_dim: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: 128, feature_dim: 64 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.hidden == 0 || self.feature_dim == 0 {
            return Err(MetricsError::Config("classifier widths must be positive".into()));
        }
        Ok(())
    }
}

/// `108 → hidden → hidden → feature_dim → 8`, GELU between layers.
#[derive(Clone, Debug)]
pub struct FeatureClassifier {
    pub config: ClassifierConfig,
    layers: [Linear; 3],
    head: Linear,
}

impl FeatureClassifier {
    pub fn new(config: ClassifierConfig) -> Self {
        let ClassifierConfig { hidden, feature_dim } = config;
        Self {
            config,
            layers: [
                Linear::new("classifier.fc1", INPUT_DIM, hidden),
                Linear::new("classifier.fc2", hidden, hidden),
                Linear::new("classifier.feature", hidden, feature_dim),
            ],
            head: Linear::new("classifier.head", feature_dim, NUM_LABELS),
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParameterStore {
        let mut store = ParameterStore::new();
        for l in &self.layers {
            l.init(&mut store, 1.0, rng);
        }
        self.head.init(&mut store, 1.0, rng);
        store
    }

    pub fn check_store(&self, store: &ParameterStore) -> Result<(), AutodiffError> {
        if !self.init(&mut ChaCha8Rng::seed_from_u64(0)).same_layout(store) {
            return Err(AutodiffError::Format("checkpoint does not match the classifier configuration".into()));
        }
        Ok(())
    }

    /// Features `[B, F]` and logits `[B, 8]` for inputs `[B, 108]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>), AutodiffError> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(p, h)?.gelu();
        }
        let logits = self.head.forward(p, h)?;
        Ok((h, logits))
    }

    fn run(&self, store: &ParameterStore, inputs: &[Vec<f64>]) -> Result<(Tensor, Tensor), MetricsError> {
        if let Some(bad) = inputs.iter().find(|r| r.len() != INPUT_DIM) {
            return Err(MetricsError::Dimension { expected: INPUT_DIM, got: bad.len() });
        }
        if inputs.is_empty() {
            return Ok((Tensor::zeros(&[0, self.config.feature_dim]), Tensor::zeros(&[0, NUM_LABELS])));
        }
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let (f, l) = self.forward(&bound, tape.constant(Tensor::from_rows(inputs)?))?;
        Ok(((*f.value()).clone(), (*l.value()).clone()))
    }

    /// Penultimate activations, one row per input.
    pub fn features(&self, store: &ParameterStore, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, MetricsError> {
        let (f, _) = self.run(store, inputs)?;
        Ok((0..inputs.len()).map(|i| f.row(i).to_vec()).collect())
    }

    /// Arg-max label per input.
    pub fn predict(&self, store: &ParameterStore, inputs: &[Vec<f64>]) -> Result<Vec<usize>, MetricsError> {
        let (_, l) = self.run(store, inputs)?;
        Ok((0..inputs.len())
            .map(|i| {
                let row = l.row(i);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect())
    }
}

/// Mean softmax cross-entropy of `logits [B, K]` against integer labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>, AutodiffError> {
    let shape = logits.shape();
    let (b, k) = (shape[0], shape[1]);
    let value = logits.value();
    // subtracting the row max is exact for log-sum-exp and keeps exp bounded
    let mut shift = vec![0.0; b * k];
    let mut onehot = vec![0.0; b * k];
    for i in 0..b {
        let m = value.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift[i * k..(i + 1) * k].fill(m);
        onehot[i * k + labels[i]] = 1.0;
    }
    let tape = logits.tape();
    let z = logits.sub(tape.constant(Tensor::new(&[b, k], shift)?))?;
    let lse = z.exp().sum_axis(1)?.log();
    let picked = z.mul(tape.constant(Tensor::new(&[b, k], onehot)?))?.sum_axis(1)?;
    Ok(lse.sub(picked)?.mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 128, lr: 2e-3, lr_final: 1e-4, seed: 0, log_every: 200 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Minibatch Adam on the cross-entropy of `(input, label)` pairs.
pub fn train_classifier(
    net: &FeatureClassifier,
    store: &mut ParameterStore,
    data: &[(Vec<f64>, usize)],
    cfg: &ClassifierTrainConfig,
) -> Result<ClassifierReport, MetricsError> {
    net.config.validate()?;
    if data.is_empty() {
        return Err(MetricsError::Empty("classifier training set".into()));
    }
    if cfg.batch_size == 0 || cfg.log_every == 0 || !(cfg.lr > 0.0 && cfg.lr_final > 0.0) {
        return Err(MetricsError::Config("batch_size, log_every and learning rates must be positive".into()));
    }
    if let Some((x, _)) = data.iter().find(|(x, _)| x.len() != INPUT_DIM) {
        return Err(MetricsError::Dimension { expected: INPUT_DIM, got: x.len() });
    }
    if let Some((_, l)) = data.iter().find(|(_, l)| *l >= NUM_LABELS) {
        return Err(MetricsError::Config(format!("label code {l} out of range")));
    }
    net.check_store(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = ClassifierReport::default();
    let mut block = Vec::new();
    for step in 0..cfg.steps {
        let picks: Vec<&(Vec<f64>, usize)> = (0..cfg.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let rows: Vec<Vec<f64>> = picks.iter().map(|(x, _)| x.clone()).collect();
        let labels: Vec<usize> = picks.iter().map(|(_, l)| *l).collect();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (_, logits) = net.forward(&bound, tape.constant(Tensor::from_rows(&rows)?))?;
        let loss = cross_entropy(logits, &labels)?;
        let value = loss.item()?;
        let grads = tape.backward(loss)?;
        store.accumulate(&bound, &grads);
        drop(bound);
        store.adam_step(cosine_lr(cfg.lr, cfg.lr_final, step, cfg.steps));
        report.losses.push(value);
        block.push(value);
        if block.len() == cfg.log_every || step + 1 == cfg.steps {
            let mean = block.iter().sum::<f64>() / block.len() as f64;
            log::info!("classifier step {} loss {mean:.5}", step + 1);
            report.epoch_losses.push(mean);
            block.clear();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_parameters;

    fn tiny() -> FeatureClassifier {
        FeatureClassifier::new(ClassifierConfig { hidden: 12, feature_dim: 6 })
    }

    fn toy_data(n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let l = rng.random_range(0..NUM_LABELS);
                let mut x: Vec<f64> = (0..INPUT_DIM).map(|_| rng.random_range(-0.3..0.3)).collect();
                x[60 + l] += 2.0;
                (x, l)
            })
            .collect()
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap());
        let got = cross_entropy(logits, &[1, 0]).unwrap().item().unwrap();
        let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let want = 0.5 * ((lse(&[1.0, 2.0, 0.5]) - 2.0) + (lse(&[-1.0, 0.0, 3.0]) + 1.0));
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = net.init(&mut rng);
        let data = toy_data(5, 2);
        let rows: Vec<Vec<f64>> = data.iter().map(|d| d.0.clone()).collect();
        let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let check = check_parameters(
            &store,
            |tape, p| {
                let (_, l) = net.forward(p, tape.constant(x.clone()))?;
                cross_entropy(l, &labels)
            },
            6,
            &mut rng,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn learns_a_separable_problem_and_is_deterministic() {
        let net = tiny();
        let data = toy_data(400, 3);
        let cfg = ClassifierTrainConfig { steps: 400, batch_size: 32, lr: 1e-2, lr_final: 1e-3, log_every: 100, seed: 4 };
        let run = || {
            let mut store = net.init(&mut ChaCha8Rng::seed_from_u64(0));
            let r = train_classifier(&net, &mut store, &data, &cfg).unwrap();
            (store, r)
        };
        let (store, report) = run();
        assert_eq!(run().1, report);
        let test = toy_data(200, 9);
        let inputs: Vec<Vec<f64>> = test.iter().map(|d| d.0.clone()).collect();
        let pred = net.predict(&store, &inputs).unwrap();
        let hits = pred.iter().zip(&test).filter(|(p, d)| **p == d.1).count();
        assert!(hits >= 190, "{hits}/200");
        assert_eq!(net.features(&store, &inputs[..3]).unwrap()[0].len(), 6);
    }

    #[test]
    fn rejects_empty_and_malformed_data() {
        let net = tiny();
        let mut store = net.init(&mut ChaCha8Rng::seed_from_u64(0));
        let cfg = ClassifierTrainConfig::default();
        assert!(matches!(train_classifier(&net, &mut store, &[], &cfg), Err(MetricsError::Empty(_))));
        assert!(train_classifier(&net, &mut store, &[(vec![0.0; 3], 0)], &cfg).is_err());
        assert!(train_classifier(&net, &mut store, &[(vec![0.0; INPUT_DIM], 8)], &cfg).is_err());
    }
}
