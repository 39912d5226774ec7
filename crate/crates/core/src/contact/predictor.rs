use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ContactError, ContactMap};
use crate::autodiff::{concat, AutodiffError, Bound, ParameterStore, Tape, Tensor, Var};
use crate::body::PosedBody;
use crate::data::NUM_LABELS;
use crate::geometry::{sub, Vec3};
use crate::nn::{Embedding, LayerNorm, Linear, MultiHeadAttention};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactConfig {
    /// Token width.
    pub dim: usize,
    pub heads: usize,
    /// Self-attention plus cross-attention blocks.
    pub blocks: usize,
    /// Probability threshold for the contact region set.
    pub tau: f64,
    /// Ground-truth contact distance in meters.
    pub delta: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        Self { dim: 64, heads: 4, blocks: 2, tau: 0.5, delta: 0.02 }
    }
}

impl ContactConfig {
    pub fn validate(&self) -> Result<(), ContactError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ContactError::Threshold(self.tau));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(ContactError::Config(format!("width {} must be a positive multiple of {} heads", self.dim, self.heads)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(ContactError::Config(format!("contact distance must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Region centers of both bodies expressed relative to the partner pelvis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactInput {
    pub interactive: Vec<Vec3>,
    pub partner: Vec<Vec3>,
    pub label: usize,
}

impl ContactInput {
    pub fn from_bodies(h: &PosedBody, p: &PosedBody, label: usize) -> Result<Self, ContactError> {
        if h.num_regions() != p.num_regions() {
            return Err(ContactError::RegionCount(h.num_regions(), p.num_regions()));
        }
        let origin = p.pelvis();
        let shift = |cs: &[Vec3]| cs.iter().map(|&c| sub(c, origin)).collect();
        Ok(Self { interactive: shift(&h.region_centers), partner: shift(&p.region_centers), label })
    }
}

#[derive(Clone, Debug)]
struct Block {
    self_norm: LayerNorm,
    self_att: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_ctx_norm: LayerNorm,
    cross_att: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

/// Transformer over the two region-center token streams with a pairwise
/// bilinear read-out.
#[derive(Clone, Debug)]
pub struct ContactPredictor {
    pub config: ContactConfig,
    pub regions: usize,
    pos1: Linear,
    pos2: Linear,
    region: Embedding,
    label: Embedding,
    stream: Embedding,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    left: Linear,
    right: Linear,
    left_bias: Linear,
    right_bias: Linear,
}

const OUT_BIAS: &str = "contact.out_bias";

impl ContactPredictor {
    pub fn new(config: ContactConfig, regions: usize) -> Self {
        let d = config.dim;
        Self {
            config,
            regions,
            pos1: Linear::new("contact.pos1", 3, d),
            pos2: Linear::new("contact.pos2", d, d),
            region: Embedding::new("contact.region", regions, d),
            label: Embedding::new("contact.label", NUM_LABELS, d),
            stream: Embedding::new("contact.stream", 2, d),
            blocks: (0..config.blocks)
                .map(|i| {
                    let n = |s: &str| format!("contact.block{i}.{s}");
                    Block {
                        self_norm: LayerNorm::new(&n("self_norm"), d),
                        self_att: MultiHeadAttention::new(&n("self_att"), d, config.heads),
                        cross_norm: LayerNorm::new(&n("cross_norm"), d),
                        cross_ctx_norm: LayerNorm::new(&n("cross_ctx_norm"), d),
                        cross_att: MultiHeadAttention::new(&n("cross_att"), d, config.heads),
                        ffn_norm: LayerNorm::new(&n("ffn_norm"), d),
                        ffn1: Linear::new(&n("ffn1"), d, 2 * d),
                        ffn2: Linear::new(&n("ffn2"), 2 * d, d),
                    }
                })
                .collect(),
            out_norm: LayerNorm::new("contact.out_norm", d),
            left: Linear::new("contact.left", d, d),
            right: Linear::new("contact.right", d, d),
            left_bias: Linear::new("contact.left_bias", d, 1),
            right_bias: Linear::new("contact.right_bias", d, 1),
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParameterStore {
        let mut s = ParameterStore::new();
        // positions are in meters; a larger gain spreads them over the width
        self.pos1.init(&mut s, 4.0, rng);
        self.pos2.init(&mut s, 1.0, rng);
        self.region.init(&mut s, 0.5, rng);
        self.label.init(&mut s, 0.5, rng);
        self.stream.init(&mut s, 0.5, rng);
        for b in &self.blocks {
            b.self_norm.init(&mut s);
            b.self_att.init(&mut s, rng);
            b.cross_norm.init(&mut s);
            b.cross_ctx_norm.init(&mut s);
            b.cross_att.init(&mut s, rng);
            b.ffn_norm.init(&mut s);
            b.ffn1.init(&mut s, 1.0, rng);
            b.ffn2.init(&mut s, 0.5, rng);
        }
        self.out_norm.init(&mut s);
        // a small read-out starts every probability near 0.5
        self.left.init(&mut s, 0.02, rng);
        self.right.init(&mut s, 0.02, rng);
        self.left_bias.init(&mut s, 0.02, rng);
        self.right_bias.init(&mut s, 0.02, rng);
        s.insert(OUT_BIAS, Tensor::vector(&[0.0]));
        s
    }

    pub fn check_store(&self, store: &ParameterStore) -> Result<(), AutodiffError> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        if !self.init(&mut rng).same_layout(store) {
            return Err(AutodiffError::Format("checkpoint does not match the contact predictor configuration".into()));
        }
        Ok(())
    }

    fn tokens<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        centers: Vec<f64>,
        labels: &[usize],
        stream: usize,
    ) -> Result<Var<'t>, AutodiffError> {
        let (b, n) = (labels.len(), self.regions);
        let pos = tape.constant(Tensor::new(&[b * n, 3], centers)?);
        let pos = self.pos2.forward(p, self.pos1.forward(p, pos)?.gelu())?;
        let region_ids: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let label_ids: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, n)).collect();
        pos.add(self.region.forward(p, &region_ids)?)?
            .add(self.label.forward(p, &label_ids)?)?
            .add(self.stream.forward(p, &[stream])?.reshape(&[self.config.dim])?)
    }

    /// Contact probabilities `[B, n, n]` for a batch of inputs.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, inputs: &[ContactInput]) -> Result<Var<'t>, ContactError> {
        let (b, n, d) = (inputs.len(), self.regions, self.config.dim);
        for inp in inputs {
            for len in [inp.interactive.len(), inp.partner.len()] {
                if len != n {
                    return Err(ContactError::RegionCount(n, len));
                }
            }
            if inp.label >= NUM_LABELS {
                return Err(ContactError::Config(format!("label {} out of range", inp.label)));
            }
        }
        let labels: Vec<usize> = inputs.iter().map(|i| i.label).collect();
        let flat = |f: fn(&ContactInput) -> &Vec<Vec3>| inputs.iter().flat_map(|i| f(i).iter().flatten().copied()).collect();
        let mut h = self.tokens(tape, p, flat(|i| &i.interactive), &labels, 0)?;
        let mut q = self.tokens(tape, p, flat(|i| &i.partner), &labels, 1)?;
        for blk in &self.blocks {
            let (hn, qn) = (blk.self_norm.forward(p, h)?, blk.self_norm.forward(p, q)?);
            h = h.add(blk.self_att.forward_batched(p, hn, hn, b, n, n)?)?;
            q = q.add(blk.self_att.forward_batched(p, qn, qn, b, n, n)?)?;
            let (hn, qn) = (blk.cross_norm.forward(p, h)?, blk.cross_norm.forward(p, q)?);
            let (hc, qc) = (blk.cross_ctx_norm.forward(p, h)?, blk.cross_ctx_norm.forward(p, q)?);
            let dh = blk.cross_att.forward_batched(p, hn, qc, b, n, n)?;
            let dq = blk.cross_att.forward_batched(p, qn, hc, b, n, n)?;
            h = h.add(dh)?;
            q = q.add(dq)?;
            let ffn = |x: Var<'t>| -> Result<Var<'t>, AutodiffError> {
                x.add(blk.ffn2.forward(p, blk.ffn1.forward(p, blk.ffn_norm.forward(p, x)?)?.gelu())?)
            };
            h = ffn(h)?;
            q = ffn(q)?;
        }
        let (h, q) = (self.out_norm.forward(p, h)?, self.out_norm.forward(p, q)?);
        // [a, 1, u] · [b, v, 1] = a·b + v + u: bilinear term plus row and column biases
        let ones = tape.constant(Tensor::ones(&[b * n, 1]));
        let left = concat(&[self.left.forward(p, h)?.scale(1.0 / (d as f64).sqrt()), ones, self.left_bias.forward(p, h)?], 1)?;
        let right = concat(&[self.right.forward(p, q)?, self.right_bias.forward(p, q)?, ones], 1)?;
        let logits = left
            .reshape(&[b, n, d + 2])?
            .bmm(right.reshape(&[b, n, d + 2])?, true)?
            .add(p.get(OUT_BIAS)?)?;
        Ok(logits.sigmoid())
    }

    /// Contact maps for a batch, in inference mode.
    pub fn predict(&self, store: &ParameterStore, inputs: &[ContactInput]) -> Result<Vec<ContactMap>, ContactError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let probs = self.forward(&tape, &p, inputs)?.value();
        let nn = self.regions * self.regions;
        probs.data().chunks(nn).map(|c| ContactMap::new(self.regions, c.to_vec())).collect()
    }

    pub fn predict_bodies(&self, store: &ParameterStore, h: &PosedBody, p: &PosedBody, label: usize) -> Result<ContactMap, ContactError> {
        let input = ContactInput::from_bodies(h, p, label)?;
        Ok(self.predict(store, &[input])?.remove(0))
    }
}

/// Mean clamped binary cross-entropy between `probs` and a same-shaped 0/1
/// target, on the tape.
pub(super) fn bce_on_tape<'t>(probs: Var<'t>, target: Var<'t>) -> Result<Var<'t>, AutodiffError> {
    let q = probs.clamp(super::PROB_CLAMP, 1.0 - super::PROB_CLAMP);
    let pos = target.mul(q.log())?;
    let neg = target.neg().add_scalar(1.0).mul(q.neg().add_scalar(1.0).log())?;
    Ok(pos.add(neg)?.mean().neg())
}
