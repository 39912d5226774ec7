//! Central finite-difference checks against tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{AutodiffError, Bound, ParameterStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Worst relative error over the probed coordinates of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub probes: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self { max_rel_error: 0.0, worst: String::new(), probes: 0 }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.probes += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = format!("{} analytic={analytic:e} numeric={numeric:e}", label());
        }
    }
}

/// Checks the gradient of a scalar loss with respect to the parameters of
/// `store`. `loss` builds the forward pass from bound parameters; at most
/// `per_tensor` randomly chosen coordinates of each tensor are probed (all of
/// them when the tensor is smaller).
pub fn check_parameters<R: Rng>(
    store: &ParameterStore,
    loss: impl for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>, AutodiffError>,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheck, AutodiffError> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let l = loss(&tape, &bound)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<(String, Tensor)> = store
        .names()
        .map(|n| Ok((n.to_string(), grads.get_or_zeros(bound.get(n)?, store.get(n).expect("bound name").shape()))))
        .collect::<Result<_, AutodiffError>>()?;
    drop(bound);

    let eval = |s: &ParameterStore| -> Result<f64, AutodiffError> {
        let tape = Tape::new();
        let bound = s.bind_frozen(&tape);
        loss(&tape, &bound)?.item()
    };
    let mut report = GradCheck::new();
    let mut probe = store.clone();
    for (name, g) in &analytic {
        let base = store.get(name).expect("known name").clone();
        let n = base.numel();
        let coords: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { sample(rng, n, per_tensor).into_vec() };
        for i in coords {
            let mut plus = base.clone();
            plus.data_mut()[i] += FD_STEP;
            probe.set(name, plus)?;
            let fp = eval(&probe)?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= FD_STEP;
            probe.set(name, minus)?;
            let fm = eval(&probe)?;
            probe.set(name, base.clone())?;
            report.record(|| format!("{name}[{i}]"), g.data()[i], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Checks the gradient of `loss` with respect to a single input tensor `x`
/// over every coordinate.
pub fn check_input(
    x: &Tensor,
    loss: impl for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, AutodiffError>,
) -> Result<GradCheck, AutodiffError> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let l = loss(&tape, xv)?;
    let grads = tape.backward(l)?;
    let g = grads.get_or_zeros(xv, x.shape());
    let eval = |t: Tensor| -> Result<f64, AutodiffError> {
        let tape = Tape::new();
        let v = tape.constant(t);
        loss(&tape, v)?.item()
    };
    let mut report = GradCheck::new();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        report.record(|| format!("x[{i}]"), g.data()[i], numeric);
    }
    Ok(report)
}
