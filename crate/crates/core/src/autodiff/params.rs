use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{AutodiffError, Gradients, Tape, Tensor, Var};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    value: Arc<Tensor>,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named trainable tensors with gradient accumulators and Adam moments.
///
/// Names are kept sorted, which fixes the checkpoint entry order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
    adam: AdamConfig,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_adam(adam: AdamConfig) -> Self {
        Self { adam, ..Self::default() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.into(),
            Entry {
                value: Arc::new(value),
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
    }

    /// Normal(0, std²) initialization.
    pub fn insert_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| e.value.as_ref())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn adam_config(&self) -> AdamConfig {
        self.adam
    }

    /// Replaces a value in place; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), AutodiffError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(AutodiffError::Shape {
                op: "set",
                detail: format!("{name}: {:?} vs {:?}", entry.value.shape(), value.shape()),
            });
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    /// Binds every parameter onto `tape` as a grad-tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Binds every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, tracked: bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(name, e)| {
                let v = if tracked {
                    tape.leaf_shared(Arc::clone(&e.value))
                } else {
                    tape.constant_shared(Arc::clone(&e.value))
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of a swept tape into the accumulators.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (name, var) in &bound.vars {
            if let (Some(g), Some(entry)) = (grads.get(*var), self.entries.get_mut(name)) {
                entry.grad.add_assign(g);
            }
        }
    }

    /// Adds an externally computed gradient (e.g. summed over worker tapes).
    pub fn accumulate_named(&mut self, name: &str, grad: &Tensor) -> Result<(), AutodiffError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))?;
        if entry.grad.shape() != grad.shape() {
            return Err(AutodiffError::Shape {
                op: "accumulate",
                detail: format!("{name}: {:?} vs {:?}", entry.grad.shape(), grad.shape()),
            });
        }
        entry.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Bias-corrected Adam update, then zeroes the accumulators.
    pub fn adam_step(&mut self, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for e in self.entries.values_mut() {
            let mut value = (*e.value).clone();
            let (p, g, m, v) = (value.data_mut(), e.grad.data_mut(), e.m.data_mut(), e.v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                g[i] = 0.0;
            }
            e.value = Arc::new(value);
        }
    }

    /// `(name, value)` pairs in checkpoint order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e.value.as_ref()))
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ea), (b, eb))| a == b && ea.value.shape() == eb.value.shape())
    }
}

/// Parameters bound onto one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>, AutodiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(store: &mut ParameterStore, g: f64) {
        store.accumulate_named("w", &Tensor::vector(&[g])).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(&[1.5, -2.0]));
        store.adam_step(0.1);
        assert_eq!(store.get("w").unwrap().data(), &[1.5, -2.0]);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε) ≈ lr.
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(&[0.0]));
        quadratic_grad(&mut store, 1.0);
        store.adam_step(0.01);
        let w = store.get("w").unwrap().data()[0];
        let expected = -0.01 * 1.0 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        assert_eq!(store.grad("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn repeated_steps_are_monotone() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(&[0.0]));
        let mut last = 0.0;
        for _ in 0..2 {
            quadratic_grad(&mut store, 0.3);
            store.adam_step(0.05);
            let w = store.get("w").unwrap().data()[0];
            assert!(w < last);
            last = w;
        }
    }
}
