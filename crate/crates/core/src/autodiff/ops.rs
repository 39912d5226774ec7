//! Differentiable operations on [`Var`].
//!
//! Binary elementwise ops broadcast a smaller operand whose shape is a suffix
//! of the larger one (a bias row against a batch, say) or that holds a single
//! element. Everything else requires exact shapes.

use std::sync::Arc;

use super::tensor::gemm;
use super::{AutodiffError, Tensor, Var};
use crate::geometry::{rodrigues_coeff_a, rodrigues_coeff_b};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), AutodiffError> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// Output shape of a suffix broadcast, or `None` if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 || (b.len() <= a.len() && a.ends_with(b)) {
        Some(a.to_vec())
    } else if na == 1 || (a.len() <= b.len() && b.ends_with(a)) {
        Some(b.to_vec())
    } else {
        None
    }
}

/// Sums a gradient of the broadcast shape back onto an operand of `numel`
/// elements with the given shape.
fn unbroadcast(grad: &[f64], shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if grad.len() == n {
        return Tensor::from_parts(shape.to_vec(), grad.to_vec());
    }
    let mut out = vec![0.0; n];
    for (i, g) in grad.iter().enumerate() {
        out[i % n] += g;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

// fallible ops cannot implement the operator traits
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        // (grad_out, a, b) -> (da, db) elementwise
        df: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Var<'t>, AutodiffError> {
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
        let n: usize = shape.iter().product();
        let (na, nb) = (a.numel(), b.numel());
        let (ad, bd) = (a.data(), b.data());
        let out: Vec<f64> = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
        let value = Tensor::from_parts(shape, out);
        Ok(self.tape.record(value, &[self, other], move |g, need| {
            let (ad, bd) = (a.data(), b.data());
            let mut ga = vec![0.0; g.numel()];
            let mut gb = vec![0.0; g.numel()];
            for (i, &go) in g.data().iter().enumerate() {
                let (da, db) = df(go, ad[i % na], bd[i % nb]);
                ga[i] = da;
                gb[i] = db;
            }
            vec![
                need[0].then(|| unbroadcast(&ga, a.shape())),
                need[1].then(|| unbroadcast(&gb, b.shape())),
            ]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "div", |a, b| a / b, |g, a, b| (g / b, -g * a / (b * b)))
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        // (x, y) -> dy/dx
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Arc::new(x.map(f));
        let y_out = Arc::clone(&y);
        self.tape.record(Arc::clone(&y), &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation (smooth, so finite differences stay valid).
    pub fn gelu(self) -> Var<'t> {
        self.unary(
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * (1.0 + th)
                    + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Clamp into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    /// Rodrigues coefficient `sin(θ)/θ` as a function of `s = θ²`.
    pub fn rodrigues_a(self) -> Var<'t> {
        self.unary(|s| rodrigues_coeff_a(s).0, |s, _| rodrigues_coeff_a(s).1)
    }

    /// Rodrigues coefficient `(1 − cos θ)/θ²` as a function of `s = θ²`.
    pub fn rodrigues_b(self) -> Var<'t> {
        self.unary(|s| rodrigues_coeff_b(s).0, |s, _| rodrigues_coeff_b(s).1)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.sum());
        self.tape.record(value, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        check_axis("sum_axis", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let gd = g.data();
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        check_axis("mean_axis", &shape, axis)?;
        let n = shape[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Minimum along `axis`. The gradient flows to the argmin only; ties go
    /// to the lowest index.
    pub fn min_reduce(self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        check_axis("min_reduce", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if len == 0 {
            return Err(shape_err("min_reduce", "empty reduction axis".into()));
        }
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xd[o * len * inner + i];
                let mut best_l = 0;
                for l in 1..len {
                    let v = xd[(o * len + l) * inner + i];
                    if v < best {
                        best = v;
                        best_l = l;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_l;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let k = o * inner + i;
                    gx[(o * len + arg[k]) * inner + i] += g.data()[k];
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        }))
    }

    /// `[m,k] @ [k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape.record(value, &[self, other], move |g, need| {
            // dA = G Bᵀ, dB = Aᵀ G
            let ga = need[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g.data(), (n as isize, 1), b.data(), (1, n as isize), &mut d);
                Tensor::from_parts(vec![m, k], d)
            });
            let gb = need[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k as isize), g.data(), (n as isize, 1), &mut d);
                Tensor::from_parts(vec![k, n], d)
            });
            vec![ga, gb]
        }))
    }

    /// Batched product of rank-3 tensors: `[b,m,k] @ [b,k,n]`, or
    /// `[b,m,k] @ [b,n,k]ᵀ` when `transpose_rhs` is set.
    pub fn bmm(self, other: Var<'t>, transpose_rhs: bool) -> Result<Var<'t>, AutodiffError> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_rhs { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            let t = if transpose_rhs { "ᵀ" } else { "" };
            return Err(shape_err("bmm", format!("{sa:?} @ {sb:?}{t}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_rhs { sb[1] } else { sb[2] };
        // strides of the right operand viewed as [k,n]
        let rhs = if transpose_rhs { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                (k as isize, 1),
                &b.data()[i * k * n..],
                rhs,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        Ok(self.tape.record(value, &[self, other], move |g, need| {
            let gd = g.data();
            let ga = need[0].then(|| {
                // dA = G·Bᵀ with B viewed as [k,n]
                let mut d = vec![0.0; batch * m * k];
                let bt = (rhs.1, rhs.0);
                for i in 0..batch {
                    gemm(m, n, k, &gd[i * m * n..], (n as isize, 1), &b.data()[i * k * n..], bt, &mut d[i * m * k..(i + 1) * m * k]);
                }
                Tensor::from_parts(vec![batch, m, k], d)
            });
            let gb = need[1].then(|| {
                let mut d = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let dst = &mut d[i * k * n..(i + 1) * k * n];
                    if transpose_rhs {
                        // dB = Gᵀ·A, shape [n,k]
                        gemm(n, m, k, &gd[i * m * n..], (1, n as isize), &a.data()[i * m * k..], (k as isize, 1), dst);
                    } else {
                        // dB = Aᵀ·G, shape [k,n]
                        gemm(k, m, n, &a.data()[i * m * k..], (1, k as isize), &gd[i * m * n..], (n as isize, 1), dst);
                    }
                }
                Tensor::from_parts(sb.clone(), d)
            });
            vec![ga, gb]
        }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(shape_err("transpose", format!("rank {} input", x.rank())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let t = transpose_data(x.data(), r, c);
        Ok(self.tape.record(Tensor::from_parts(vec![c, r], t), &[self], move |g, _| {
            vec![Some(Tensor::from_parts(vec![r, c], transpose_data(g.data(), c, r)))]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        let value = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(value, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]
        }))
    }

    /// Elements `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        check_axis("slice", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if start > end || end > len {
            return Err(shape_err("slice", format!("[{start},{end}) of axis {axis} in {:?}", x.shape())));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&x.data()[base..base + w * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = w;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(Tensor::from_parts(shape, out), &[self], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let base = (o * len + start) * inner;
                gx[base..base + w * inner]
                    .copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        }))
    }

    /// Rows `indices` of a rank-2 tensor (embedding lookup).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(shape_err("gather_rows", format!("rank {} input", x.rank())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(x.row(i));
        }
        let idx = indices.to_vec();
        Ok(self.tape.record(
            Tensor::from_parts(vec![indices.len(), c], out),
            &[self],
            move |g, _| {
                let mut gx = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g.data()[k * c + j];
                    }
                }
                vec![Some(Tensor::from_parts(vec![r, c], gx))]
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(shape_err("softmax", "scalar input".into()));
        }
        let c = x.cols();
        let mut y = vec![0.0; x.numel()];
        for (row_in, row_out) in x.data().chunks(c).zip(y.chunks_mut(c)) {
            let m = row_in.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - m).exp();
                z += *o;
            }
            row_out.iter_mut().for_each(|o| *o /= z);
        }
        let y = Arc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let y_b = Arc::clone(&y);
        Ok(self.tape.record(Arc::clone(&y), &[self], move |g, _| {
            let mut gx = vec![0.0; g.numel()];
            for ((gr, yr), out) in g.data().chunks(c).zip(y_b.data().chunks(c)).zip(gx.chunks_mut(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(y_b.shape().to_vec(), gx))]
        }))
    }

    /// Normalization over the last axis without affine terms. A constant row
    /// maps to zeros since the denominator is `sqrt(var + 1e-5)`.
    pub fn layer_norm(self) -> Result<Var<'t>, AutodiffError> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(shape_err("layer_norm", "scalar input".into()));
        }
        let c = x.cols();
        let rows = x.numel() / c.max(1);
        let mut y = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (row_in, row_out)) in x.data().chunks(c).zip(y.chunks_mut(c)).enumerate() {
            let mu = row_in.iter().sum::<f64>() / c as f64;
            let var = row_in.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - mu) * is;
            }
        }
        let y = Arc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let y_b = Arc::clone(&y);
        Ok(self.tape.record(Arc::clone(&y), &[self], move |g, _| {
            let mut gx = vec![0.0; g.numel()];
            for (r, ((gr, yr), out)) in
                g.data().chunks(c).zip(y_b.data().chunks(c)).zip(gx.chunks_mut(c)).enumerate()
            {
                let mean_g = gr.iter().sum::<f64>() / c as f64;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                }
            }
            vec![Some(Tensor::from_parts(y_b.shape().to_vec(), gx))]
        }))
    }

    /// Pairwise squared Euclidean distances between the rows of `self` `[n,d]`
    /// and `other` `[m,d]`, giving `[n,m]`.
    pub fn sq_dists(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
            return Err(shape_err("sq_dists", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let (n, m, d) = (a.rows(), b.rows(), a.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = a.row(i);
            for j in 0..m {
                out[i * m + j] = sq_dist(ai, b.row(j));
            }
        }
        Ok(self.tape.record(Tensor::from_parts(vec![n, m], out), &[self, other], move |g, need| {
            let mut ga = vec![0.0; n * d];
            let mut gb = vec![0.0; m * d];
            for i in 0..n {
                for j in 0..m {
                    let gij = g.data()[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = 2.0 * gij * (a.data()[i * d + k] - b.data()[j * d + k]);
                        ga[i * d + k] += diff;
                        gb[j * d + k] -= diff;
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::from_parts(vec![n, d], ga)),
                need[1].then(|| Tensor::from_parts(vec![m, d], gb)),
            ]
        }))
    }
}

/// Squared Euclidean distance, summed coordinate by coordinate in order.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn transpose_data(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, AutodiffError> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "no operands".into()))?;
    let values: Vec<Arc<Tensor>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    check_axis("concat", &base, axis)?;
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape.record(Tensor::from_parts(shape, out), parts, move |g, need| {
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
        let mut offset = 0;
        for _ in 0..outer {
            for (gv, &l) in grads.iter_mut().zip(&lens) {
                gv.extend_from_slice(&g.data()[offset..offset + l * inner]);
                offset += l * inner;
            }
        }
        grads
            .into_iter()
            .zip(&shapes)
            .zip(need)
            .map(|((gv, s), &n)| n.then(|| Tensor::from_parts(s.clone(), gv)))
            .collect()
    }))
}
