use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DiffusionError, NoiseSchedule};
use crate::autodiff::{ParameterStore, Tensor};
use crate::body::{segment_of, PARAM_DIM};
use crate::denoiser::Denoiser;

/// Correction applied to the predicted clean samples at each step.
pub trait Guide {
    /// Gradients of the guidance objective with respect to the interactive
    /// parameters, one per row of `x0`, evaluated at `x0`.
    fn gradients(&self, x0: &[Vec<f64>], partners: &[Vec<f64>], labels: &[usize], t: usize) -> Result<Vec<Vec<f64>>, DiffusionError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    pub scale_partner: f64,
    pub scale_label: f64,
    /// Per-segment step size on the guidance gradient.
    pub lambda: [f64; 4],
    /// Guidance gradient steps per diffusion step.
    pub inner_iters: usize,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { scale_partner: 1.5, scale_label: 1.5, lambda: [0.0; 4], inner_iters: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub samples: Vec<Vec<f64>>,
    /// Number of guidance gradient evaluations per sample.
    pub guidance_evals: Vec<usize>,
}

/// Independent generator for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `x̂0 = x̃0 − λ⊙g` with `λ` broadcast over the parameter segments. Entries
/// with `λ = 0` are copied unchanged.
pub fn apply_guidance(x0: &[f64], g: &[f64], lambda: &[f64; 4]) -> Result<Vec<f64>, DiffusionError> {
    for v in [x0, g] {
        if v.len() != PARAM_DIM {
            return Err(DiffusionError::Dimension { expected: PARAM_DIM, got: v.len() });
        }
    }
    Ok(x0
        .iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&x, &gi))| {
            let l = lambda[segment_of(i)];
            if l == 0.0 {
                x
            } else {
                x - l * gi
            }
        })
        .collect())
}

/// Deterministic DDIM over `timesteps` (descending) for a batch of
/// conditions. Sample `i` starts from noise drawn by
/// `sample_rng(seed, first_index + i)`, so results do not depend on how a
/// request is split into batches. When `guide` is given, every step corrects
/// the predicted clean sample with `inner_iters` guidance gradient steps.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch(
    denoiser: &Denoiser,
    store: &ParameterStore,
    sched: &NoiseSchedule,
    timesteps: &[usize],
    partners: &[Vec<f64>],
    labels: &[usize],
    first_index: u64,
    guide: Option<&dyn Guide>,
    opts: &SampleOptions,
) -> Result<SampleOutput, DiffusionError> {
    let b = partners.len();
    if labels.len() != b {
        return Err(DiffusionError::Dimension { expected: b, got: labels.len() });
    }
    if let Some(p) = partners.iter().find(|p| p.len() != PARAM_DIM) {
        return Err(DiffusionError::Dimension { expected: PARAM_DIM, got: p.len() });
    }
    if timesteps.is_empty() || timesteps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(DiffusionError::Config("time steps must be non-empty and strictly decreasing".into()));
    }
    if opts.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(DiffusionError::Config(format!("guidance scales must be finite and >= 0, got {:?}", opts.lambda)));
    }
    if b == 0 {
        return Ok(SampleOutput { samples: Vec::new(), guidance_evals: Vec::new() });
    }
    let mut x: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let mut rng = sample_rng(opts.seed, first_index + i as u64);
            (0..PARAM_DIM).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    let partner_tensor = Tensor::from_rows(partners)?;
    let mut evals = vec![0usize; b];
    for (k, &t) in timesteps.iter().enumerate() {
        let to = timesteps.get(k + 1).copied().unwrap_or(0);
        let x_t = Tensor::from_rows(&x)?;
        let eps = denoiser.predict_guided(store, &x_t, &vec![t; b], &partner_tensor, labels, opts.scale_partner, opts.scale_label)?;
        let mut x0: Vec<Vec<f64>> = (0..b).map(|i| sched.predict_x0(&x[i], t, eps.row(i))).collect::<Result<_, _>>()?;
        if let Some(g) = guide {
            for _ in 0..opts.inner_iters {
                let grads = g.gradients(&x0, partners, labels, t)?;
                if grads.len() != b {
                    return Err(DiffusionError::Dimension { expected: b, got: grads.len() });
                }
                for i in 0..b {
                    evals[i] += 1;
                    x0[i] = apply_guidance(&x0[i], &grads[i], &opts.lambda)?;
                }
            }
        }
        x = (0..b).map(|i| sched.ddim_step_to(&x[i], &x0[i], t, to)).collect::<Result<_, _>>()?;
    }
    if let Some(bad) = x.iter().position(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(DiffusionError::Guidance(format!("sample {bad} became non-finite")));
    }
    Ok(SampleOutput { samples: x, guidance_evals: evals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::SEGMENTS;
    use crate::denoiser::DenoiserConfig;
    use crate::diffusion::DiffusionConfig;

    fn setup() -> (Denoiser, ParameterStore) {
        let net = Denoiser::new(DenoiserConfig { width: 16, blocks: 1, time_dim: 8, label_dim: 4, partner_dim: 8, ..DenoiserConfig::default() });
        let store = net.init(&mut ChaCha8Rng::seed_from_u64(3));
        (net, store)
    }

    /// Pulls every coordinate toward 1.
    struct Pull;
    impl Guide for Pull {
        fn gradients(&self, x0: &[Vec<f64>], _: &[Vec<f64>], _: &[usize], _: usize) -> Result<Vec<Vec<f64>>, DiffusionError> {
            Ok(x0.iter().map(|r| r.iter().map(|v| v - 1.0).collect()).collect())
        }
    }

    fn partners(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..PARAM_DIM).map(|j| ((i * 7 + j) as f64 * 0.1).sin() * 0.3).collect()).collect()
    }

    #[test]
    fn apply_guidance_broadcasts_per_segment() {
        let x: Vec<f64> = (0..PARAM_DIM).map(|i| i as f64 * 0.1).collect();
        let g: Vec<f64> = (0..PARAM_DIM).map(|i| (i as f64).cos()).collect();
        let lambda = [0.1, 0.2, 0.3, 0.4];
        let out = apply_guidance(&x, &g, &lambda).unwrap();
        for (s, seg) in SEGMENTS.iter().enumerate() {
            for i in seg.clone() {
                assert!((out[i] - (x[i] - lambda[s] * g[i])).abs() <= 1e-15);
            }
        }
        assert_eq!(apply_guidance(&x, &g, &[0.0; 4]).unwrap(), x);
        assert_eq!(apply_guidance(&x, &vec![0.0; PARAM_DIM], &lambda).unwrap(), x);
        assert!(apply_guidance(&x[1..], &g, &lambda).is_err());
    }

    #[test]
    fn zero_lambda_matches_unguided_bitwise() {
        let (net, store) = setup();
        let dc = DiffusionConfig { steps: 50, ..DiffusionConfig::default() };
        let sched = dc.schedule().unwrap();
        let p = partners(3);
        let opts = SampleOptions { seed: 11, ..SampleOptions::default() };
        let plain = sample_batch(&net, &store, &sched, &dc.timesteps(), &p, &[0, 1, 2], 0, None, &opts).unwrap();
        let zero = sample_batch(&net, &store, &sched, &dc.timesteps(), &p, &[0, 1, 2], 0, Some(&Pull), &opts).unwrap();
        let bits = |o: &SampleOutput| o.samples.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&plain), bits(&zero));
        assert_eq!(zero.guidance_evals, vec![50; 3]);
        assert_eq!(plain.guidance_evals, vec![0; 3]);
    }

    #[test]
    fn guidance_runs_every_step_and_moves_samples() {
        let (net, store) = setup();
        let dc = DiffusionConfig { steps: 100, stride: 4, ..DiffusionConfig::default() };
        let sched = dc.schedule().unwrap();
        let p = partners(2);
        let opts = SampleOptions { lambda: [0.5; 4], inner_iters: 2, seed: 1, ..SampleOptions::default() };
        let out = sample_batch(&net, &store, &sched, &dc.timesteps(), &p, &[4, 5], 0, Some(&Pull), &opts).unwrap();
        assert_eq!(out.guidance_evals, vec![50; 2]);
        let plain = sample_batch(&net, &store, &sched, &dc.timesteps(), &p, &[4, 5], 0, None, &opts).unwrap();
        let dist = |o: &SampleOutput| o.samples[0].iter().map(|v| (v - 1.0).powi(2)).sum::<f64>();
        assert!(dist(&out) < dist(&plain));
    }

    #[test]
    fn samples_do_not_depend_on_batch_split() {
        let (net, store) = setup();
        let dc = DiffusionConfig { steps: 20, ..DiffusionConfig::default() };
        let sched = dc.schedule().unwrap();
        let p = partners(4);
        let opts = SampleOptions { seed: 5, ..SampleOptions::default() };
        let ts = dc.timesteps();
        let all = sample_batch(&net, &store, &sched, &ts, &p, &[0, 1, 2, 3], 0, None, &opts).unwrap();
        let tail = sample_batch(&net, &store, &sched, &ts, &p[2..], &[2, 3], 2, None, &opts).unwrap();
        for (a, b) in all.samples[2..].iter().zip(&tail.samples) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let again = sample_batch(&net, &store, &sched, &ts, &p, &[0, 1, 2, 3], 0, None, &opts).unwrap();
        assert_eq!(all, again);
    }

    #[test]
    fn rejects_bad_requests() {
        let (net, store) = setup();
        let sched = NoiseSchedule::linear(10, 1e-3, 1e-2).unwrap();
        let p = partners(1);
        let o = SampleOptions::default();
        assert!(sample_batch(&net, &store, &sched, &[10, 5], &p, &[0, 1], 0, None, &o).is_err());
        assert!(sample_batch(&net, &store, &sched, &[5, 10], &p, &[0], 0, None, &o).is_err());
        let neg = SampleOptions { lambda: [-1.0, 0.0, 0.0, 0.0], ..o };
        assert!(sample_batch(&net, &store, &sched, &[10], &p, &[0], 0, None, &neg).is_err());
    }
}
