//! Conditional noise predictor: a residual MLP over the noisy parameters, a
//! sinusoidal time embedding, an encoded partner and a label embedding, with
//! learned null embeddings for masked conditions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, AutodiffError, Bound, ParameterStore, Tape, Tensor, Var};
use crate::body::PARAM_DIM;
use crate::data::NUM_LABELS;
use crate::nn::{Embedding, LayerNorm, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub label_dim: usize,
    pub partner_dim: usize,
    /// Probability of hiding the partner only.
    pub p_partner: f64,
    /// Probability of hiding partner and label together.
    pub p_both: f64,
    /// Guidance scale on the partner condition.
    pub scale_partner: f64,
    /// Guidance scale on the label condition.
    pub scale_label: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 256,
            blocks: 4,
            time_dim: 64,
            label_dim: 32,
            partner_dim: 128,
            p_partner: 0.1,
            p_both: 0.1,
            scale_partner: 1.5,
            scale_label: 1.5,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), String> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_partner) || !prob(self.p_both) || self.p_partner + self.p_both > 1.0 {
            return Err(format!(
                "dropout probabilities must lie in [0,1] with sum <= 1, got {} and {}",
                self.p_partner, self.p_both
            ));
        }
        if self.width == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) || self.label_dim == 0 || self.partner_dim == 0 {
            return Err("denoiser widths must be positive and time_dim even".into());
        }
        if !self.scale_partner.is_finite() || !self.scale_label.is_finite() {
            return Err("guidance scales must be finite".into());
        }
        Ok(())
    }
}

/// Sinusoidal embedding: entry `2i` is `sin(t·ωᵢ)`, entry `2i+1` is
/// `cos(t·ωᵢ)`, with `ωᵢ = 10000^(−i/(dim/2))`.
pub fn embed_time(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
    out
}

/// Which conditions are visible to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CondMask {
    pub partner: bool,
    pub label: bool,
}

impl CondMask {
    pub const FULL: Self = Self { partner: true, label: true };
    pub const LABEL_ONLY: Self = Self { partner: false, label: true };
    pub const NONE: Self = Self { partner: false, label: false };

    /// Training-time dropout draw: both hidden with `p_both`, the partner
    /// alone with `p_partner`, otherwise everything visible.
    pub fn sample<R: Rng>(cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let u: f64 = rng.random();
        if u < cfg.p_both {
            Self::NONE
        } else if u < cfg.p_both + cfg.p_partner {
            Self::LABEL_ONLY
        } else {
            Self::FULL
        }
    }
}

/// Inputs for one batch: rows of `x_t`, partners and labels line up.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseBatch<'a> {
    pub x_t: &'a Tensor,
    pub t: &'a [usize],
    pub partners: &'a Tensor,
    pub labels: &'a [usize],
    pub masks: &'a [CondMask],
}

#[derive(Clone, Debug)]
struct Block {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    input: Linear,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    out: Linear,
    partner: Linear,
    /// `NUM_LABELS` label rows plus a trailing null row.
    labels: Embedding,
}

const NULL_PARTNER: &str = "denoiser.partner_null";

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Self {
        let w = config.width;
        let in_dim = PARAM_DIM + config.time_dim + config.partner_dim + config.label_dim;
        Self {
            config,
            input: Linear::new("denoiser.input", in_dim, w),
            blocks: (0..config.blocks)
                .map(|i| Block {
                    norm: LayerNorm::new(&format!("denoiser.block{i}.norm"), w),
                    fc1: Linear::new(&format!("denoiser.block{i}.fc1"), w, w),
                    fc2: Linear::new(&format!("denoiser.block{i}.fc2"), w, w),
                })
                .collect(),
            out_norm: LayerNorm::new("denoiser.out_norm", w),
            out: Linear::new("denoiser.out", w, PARAM_DIM),
            partner: Linear::new("denoiser.partner", PARAM_DIM, config.partner_dim),
            labels: Embedding::new("denoiser.label", NUM_LABELS + 1, config.label_dim),
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParameterStore {
        let mut store = ParameterStore::new();
        self.input.init(&mut store, 1.0, rng);
        for b in &self.blocks {
            b.norm.init(&mut store);
            b.fc1.init(&mut store, 1.0, rng);
            b.fc2.init(&mut store, 0.5, rng);
        }
        self.out_norm.init(&mut store);
        self.out.init(&mut store, 0.5, rng);
        self.partner.init(&mut store, 1.0, rng);
        self.labels.init(&mut store, 1.0, rng);
        store.insert_normal(NULL_PARTNER, &[self.config.partner_dim], 1.0, rng);
        store
    }

    /// Checks that `store` has exactly this network's layout.
    pub fn check_store(&self, store: &ParameterStore) -> Result<(), AutodiffError> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let want = self.init(&mut rng);
        if !want.same_layout(store) {
            return Err(AutodiffError::Format("checkpoint does not match the denoiser configuration".into()));
        }
        Ok(())
    }

    /// Predicted noise `[B, 54]` for a batch.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &DenoiseBatch<'_>) -> Result<Var<'t>, AutodiffError> {
        let b = batch.t.len();
        let shape_ok = batch.x_t.shape() == [b, PARAM_DIM]
            && batch.partners.shape() == [b, PARAM_DIM]
            && batch.labels.len() == b
            && batch.masks.len() == b;
        if !shape_ok {
            return Err(AutodiffError::Shape {
                op: "denoiser",
                detail: format!(
                    "x_t {:?}, partners {:?}, {} labels, {} masks for {b} time steps",
                    batch.x_t.shape(),
                    batch.partners.shape(),
                    batch.labels.len(),
                    batch.masks.len()
                ),
            });
        }
        let td = self.config.time_dim;
        let mut temb = Vec::with_capacity(b * td);
        for &t in batch.t {
            temb.extend(embed_time(t, td));
        }
        let temb = tape.constant(Tensor::new(&[b, td], temb)?);

        // encoded partners with the null vector appended as row `b`
        let enc = self.partner.forward(p, tape.constant(batch.partners.clone()))?;
        let null = p.get(NULL_PARTNER)?.reshape(&[1, self.config.partner_dim])?;
        let rows: Vec<usize> = batch.masks.iter().enumerate().map(|(i, m)| if m.partner { i } else { b }).collect();
        let partner = concat(&[enc, null], 0)?.gather_rows(&rows)?;

        let ids: Vec<usize> = batch
            .labels
            .iter()
            .zip(batch.masks)
            .map(|(&l, m)| if m.label { l } else { NUM_LABELS })
            .collect();
        let label = self.labels.forward(p, &ids)?;

        let x = tape.constant(batch.x_t.clone());
        let mut h = self.input.forward(p, concat(&[x, temb, partner, label], 1)?)?;
        for blk in &self.blocks {
            let r = blk.fc2.forward(p, blk.fc1.forward(p, blk.norm.forward(p, h)?)?.gelu())?;
            h = h.add(r)?;
        }
        self.out.forward(p, self.out_norm.forward(p, h)?)
    }

    /// Inference-mode prediction.
    pub fn predict(&self, store: &ParameterStore, batch: &DenoiseBatch<'_>) -> Result<Tensor, AutodiffError> {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        Ok((*self.forward(&tape, &p, batch)?.value()).clone())
    }

    /// Classifier-free guided noise estimate
    /// `ε∅ + s_l·(ε_l − ε∅) + s_p·(ε_pl − ε_l)`. With both scales equal to 1
    /// only the fully conditioned branch is evaluated.
    pub fn predict_guided(
        &self,
        store: &ParameterStore,
        x_t: &Tensor,
        t: &[usize],
        partners: &Tensor,
        labels: &[usize],
        scale_partner: f64,
        scale_label: f64,
    ) -> Result<Tensor, AutodiffError> {
        let b = t.len();
        if scale_partner == 1.0 && scale_label == 1.0 {
            let masks = vec![CondMask::FULL; b];
            return self.predict(store, &DenoiseBatch { x_t, t, partners, labels, masks: &masks });
        }
        let triple = |x: &Tensor| -> Result<Tensor, AutodiffError> {
            Tensor::new(&[3 * b, PARAM_DIM], [x.data(), x.data(), x.data()].concat())
        };
        let masks: Vec<CondMask> = [CondMask::FULL, CondMask::LABEL_ONLY, CondMask::NONE]
            .iter()
            .flat_map(|&m| std::iter::repeat_n(m, b))
            .collect();
        let (tt, lt) = ([t, t, t].concat(), [labels, labels, labels].concat());
        let (xt3, p3) = (triple(x_t)?, triple(partners)?);
        let out = self.predict(store, &DenoiseBatch { x_t: &xt3, t: &tt, partners: &p3, labels: &lt, masks: &masks })?;
        let n = b * PARAM_DIM;
        let (full, lab, none) = (&out.data()[..n], &out.data()[n..2 * n], &out.data()[2 * n..]);
        Tensor::new(&[b, PARAM_DIM], combine_guidance(full, lab, none, scale_partner, scale_label))
    }
}

/// `ε∅ + s_l·(ε_l − ε∅) + s_p·(ε_pl − ε_l)` elementwise.
pub fn combine_guidance(full: &[f64], label_only: &[f64], none: &[f64], scale_partner: f64, scale_label: f64) -> Vec<f64> {
    full.iter()
        .zip(label_only)
        .zip(none)
        .map(|((&f, &l), &u)| u + scale_label * (l - u) + scale_partner * (f - l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Denoiser {
        Denoiser::new(DenoiserConfig { width: 16, blocks: 2, time_dim: 8, label_dim: 4, partner_dim: 6, ..DenoiserConfig::default() })
    }

    fn inputs(rng: &mut ChaCha8Rng, b: usize) -> (Tensor, Vec<usize>, Tensor, Vec<usize>) {
        let x = Tensor::new(&[b, PARAM_DIM], (0..b * PARAM_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let p = Tensor::new(&[b, PARAM_DIM], (0..b * PARAM_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let t = (0..b).map(|_| rng.random_range(1..=1000)).collect();
        let l = (0..b).map(|_| rng.random_range(0..NUM_LABELS)).collect();
        (x, t, p, l)
    }

    #[test]
    fn time_embedding_properties() {
        let a = embed_time(10, 64);
        let b = embed_time(11, 64);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() > 0.0);
        // direct formula
        let t = 37.0;
        for i in 0..32 {
            let w = 10_000f64.powf(-(i as f64) / 32.0);
            let e = embed_time(37, 64);
            assert!((e[2 * i] - (t * w).sin()).abs() < 1e-12);
            assert!((e[2 * i + 1] - (t * w).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shape_and_partner_mask_matters() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = net.init(&mut rng);
        let (x, t, p, l) = inputs(&mut rng, 3);
        let full = net.predict(&store, &DenoiseBatch { x_t: &x, t: &t, partners: &p, labels: &l, masks: &[CondMask::FULL; 3] }).unwrap();
        assert_eq!(full.shape(), &[3, PARAM_DIM]);
        let hidden = net
            .predict(&store, &DenoiseBatch { x_t: &x, t: &t, partners: &p, labels: &l, masks: &[CondMask::LABEL_ONLY; 3] })
            .unwrap();
        assert_ne!(full, hidden);
        let again = net.predict(&store, &DenoiseBatch { x_t: &x, t: &t, partners: &p, labels: &l, masks: &[CondMask::FULL; 3] }).unwrap();
        assert_eq!(full, again);
    }

    #[test]
    fn guided_combination() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = net.init(&mut rng);
        let (x, t, p, l) = inputs(&mut rng, 4);
        let branch = |m: CondMask| net.predict(&store, &DenoiseBatch { x_t: &x, t: &t, partners: &p, labels: &l, masks: &[m; 4] }).unwrap();
        let (f, lo, n) = (branch(CondMask::FULL), branch(CondMask::LABEL_ONLY), branch(CondMask::NONE));
        assert_eq!(net.predict_guided(&store, &x, &t, &p, &l, 1.0, 1.0).unwrap(), f);
        let zero = net.predict_guided(&store, &x, &t, &p, &l, 0.0, 0.0).unwrap();
        for (a, b) in zero.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = net.predict_guided(&store, &x, &t, &p, &l, 1.7, 2.3).unwrap();
        for i in 0..g.numel() {
            let want = n.data()[i] + 2.3 * (lo.data()[i] - n.data()[i]) + 1.7 * (f.data()[i] - lo.data()[i]);
            assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_rates_match_configuration() {
        let cfg = DenoiserConfig { p_partner: 0.15, p_both: 0.1, ..DenoiserConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let (mut only, mut none) = (0usize, 0usize);
        for _ in 0..n {
            match CondMask::sample(&cfg, &mut rng) {
                CondMask::LABEL_ONLY => only += 1,
                CondMask::NONE => none += 1,
                _ => {}
            }
        }
        for (count, p) in [(only, 0.15), (none, 0.1)] {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((count as f64 / n as f64 - p).abs() < 3.0 * se, "{count} vs {p}");
        }
        let off = DenoiserConfig { p_partner: 0.0, p_both: 0.0, ..cfg };
        assert!((0..1000).all(|_| CondMask::sample(&off, &mut rng) == CondMask::FULL));
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = net.init(&mut rng);
        let (x, t, p, l) = inputs(&mut rng, 3);
        let masks = [CondMask::FULL, CondMask::LABEL_ONLY, CondMask::NONE];
        let target = Tensor::new(&[3, PARAM_DIM], (0..3 * PARAM_DIM).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let r = check_parameters(
            &store,
            |tape, bound| {
                let y = net.forward(tape, bound, &DenoiseBatch { x_t: &x, t: &t, partners: &p, labels: &l, masks: &masks })?;
                Ok(y.sub(tape.constant(target.clone()))?.square().mean())
            },
            8,
            &mut rng,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn rejects_mismatched_batches() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = net.init(&mut rng);
        let (x, t, p, l) = inputs(&mut rng, 2);
        assert!(net.predict(&store, &DenoiseBatch { x_t: &x, t: &t[..1], partners: &p, labels: &l, masks: &[CondMask::FULL] }).is_err());
        let other = Denoiser::new(DenoiserConfig::default());
        assert!(other.check_store(&store).is_err());
        assert!(net.check_store(&store).is_ok());
    }
}
