//! Layer building blocks over a [`ParameterStore`]. Each layer only knows its
//! parameter names; weights live in the store and are bound per tape.

use rand::Rng;

use crate::autodiff::{concat, AutodiffError, Bound, ParameterStore, Tensor, Var};

/// Cosine decay from `lr` at step 0 to `lr_final` at step `steps − 1`.
pub fn cosine_lr(lr: f64, lr_final: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return lr;
    }
    let frac = step as f64 / (steps - 1) as f64;
    lr_final + 0.5 * (lr - lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// `y = x·W + b` on row-major batches `[n, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self { weight: format!("{name}.weight"), bias: format!("{name}.bias"), in_dim, out_dim }
    }

    /// Normal weights with variance `gain² / in_dim`, zero bias.
    pub fn init<R: Rng>(&self, store: &mut ParameterStore, gain: f64, rng: &mut R) {
        store.insert_normal(&self.weight, &[self.in_dim, self.out_dim], gain / (self.in_dim as f64).sqrt(), rng);
        store.insert(&self.bias, Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        x.matmul(p.get(&self.weight)?)?.add(p.get(&self.bias)?)
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: String,
    bias: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self { gain: format!("{name}.gain"), bias: format!("{name}.bias"), dim }
    }

    pub fn init(&self, store: &mut ParameterStore) {
        store.insert(&self.gain, Tensor::ones(&[self.dim]));
        store.insert(&self.bias, Tensor::zeros(&[self.dim]));
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        x.layer_norm()?.mul(p.get(&self.gain)?)?.add(p.get(&self.bias)?)
    }
}

/// Lookup table `[count, dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    table: String,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: &str, count: usize, dim: usize) -> Self {
        Self { table: format!("{name}.table"), count, dim }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, std: f64, rng: &mut R) {
        store.insert_normal(&self.table, &[self.count, self.dim], std, rng);
    }

    /// Rows for `ids`, `[ids.len(), dim]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, ids: &[usize]) -> Result<Var<'t>, AutodiffError> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.count) {
            return Err(AutodiffError::Shape {
                op: "embedding",
                detail: format!("id {bad} out of range for {} rows", self.count),
            });
        }
        p.get(&self.table)?.gather_rows(ids)
    }
}

/// Scaled dot-product attention with `heads` heads and output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(&format!("{name}.q"), dim, dim),
            k: Linear::new(&format!("{name}.k"), dim, dim),
            v: Linear::new(&format!("{name}.v"), dim, dim),
            out: Linear::new(&format!("{name}.out"), dim, dim),
            dim,
            heads,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, 1.0, rng);
        }
    }

    /// Queries from `x` `[n, dim]` attend over `context` `[m, dim]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, context: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (n, m) = (x.shape()[0], context.shape()[0]);
        self.forward_batched(p, x, context, 1, n, m)
    }

    /// Independent attention for `batch` groups: `x` is `[batch·n, dim]` and
    /// `context` is `[batch·m, dim]`; group `i` of queries only sees group `i`
    /// of the context.
    pub fn forward_batched<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        context: Var<'t>,
        batch: usize,
        n: usize,
        m: usize,
    ) -> Result<Var<'t>, AutodiffError> {
        let d = self.dim;
        let q = self.q.forward(p, x)?.reshape(&[batch, n, d])?;
        let k = self.k.forward(p, context)?.reshape(&[batch, m, d])?;
        let v = self.v.forward(p, context)?.reshape(&[batch, m, d])?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice(2, lo, hi)?;
            let kh = k.slice(2, lo, hi)?;
            let vh = v.slice(2, lo, hi)?;
            let weights = qh.bmm(kh, true)?.scale(scale).softmax()?;
            heads.push(weights.bmm(vh, false)?);
        }
        self.out.forward(p, concat(&heads, 2)?.reshape(&[batch * n, d])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_parameters;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let l = Linear::new("fc", 3, 2);
        l.init(&mut store, 1.0, &mut rng);
        store.set("fc.bias", Tensor::vector(&[1.0, -1.0])).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let y = l.forward(&p, tape.constant(Tensor::zeros(&[4, 3]))).unwrap();
        assert_eq!(y.shape(), vec![4, 2]);
        assert_eq!(y.value().row(3), &[1.0, -1.0]);
    }

    #[test]
    fn embedding_rejects_unknown_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let e = Embedding::new("emb", 4, 2);
        e.init(&mut store, 1.0, &mut rng);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        assert!(e.forward(&p, &[4]).is_err());
        assert_eq!(e.forward(&p, &[1, 1, 3]).unwrap().shape(), vec![3, 2]);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let att = MultiHeadAttention::new("att", 8, 2);
        att.init(&mut store, &mut rng);
        let norm = LayerNorm::new("ln", 8);
        norm.init(&mut store);
        let x = Tensor::new(&[3, 8], (0..24).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap();
        let c = Tensor::new(&[5, 8], (0..40).map(|i| (i as f64 * 0.17).cos()).collect()).unwrap();
        let report = check_parameters(
            &store,
            |tape, p| {
                let y = att.forward(p, tape.constant(x.clone()), tape.constant(c.clone()))?;
                Ok(norm.forward(p, y)?.gelu().square().mean())
            },
            usize::MAX,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn batched_attention_keeps_groups_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParameterStore::new();
        let att = MultiHeadAttention::new("att", 4, 2);
        att.init(&mut store, &mut rng);
        let rows = |n: usize, s: f64| Tensor::new(&[n, 4], (0..n * 4).map(|i| (i as f64 * s).sin()).collect()).unwrap();
        let (x1, c1, x2, c2) = (rows(2, 0.3), rows(3, 0.7), rows(2, 1.1), rows(3, 0.2));
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let single = |x: &Tensor, c: &Tensor| att.forward(&p, tape.constant(x.clone()), tape.constant(c.clone())).unwrap().value();
        let (y1, y2) = (single(&x1, &c1), single(&x2, &c2));
        let cat = |a: &Tensor, b: &Tensor| Tensor::new(&[a.rows() + b.rows(), 4], [a.data(), b.data()].concat()).unwrap();
        let both = att
            .forward_batched(&p, tape.constant(cat(&x1, &x2)), tape.constant(cat(&c1, &c2)), 2, 2, 3)
            .unwrap()
            .value();
        for (a, b) in both.data().iter().zip(y1.data().iter().chain(y2.data())) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
