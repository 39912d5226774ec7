//! Finite-difference and algebraic checks for every registered op.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_input;
use super::{concat, AutodiffError, Tape, Tensor, Var};

const TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts an op's output with fixed random weights so every output
/// coordinate contributes to the checked scalar.
fn contract<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &y.shape(), -1.0, 1.0);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

/// Runs the check on several random inputs and asserts the worst error.
fn check_unary(name: &str, shape: &[usize], lo: f64, hi: f64, op: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>, AutodiffError>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..5 {
        let x = uniform(&mut rng, shape, lo, hi);
        let r = check_input(&x, |_, v| contract(op(v)?, trial)).unwrap();
        assert!(r.max_rel_error < TOL, "{name}: {} ({})", r.max_rel_error, r.worst);
    }
}

/// Checks both operands of a binary op; `b` is held constant while `a`
/// varies and vice versa.
fn check_binary(
    name: &str,
    sa: &[usize],
    sb: &[usize],
    range_b: (f64, f64),
    op: impl for<'t> Fn(Var<'t>, Var<'t>) -> Result<Var<'t>, AutodiffError>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 104_729);
    for trial in 0..5 {
        let a = uniform(&mut rng, sa, -1.0, 1.0);
        let b = uniform(&mut rng, sb, range_b.0, range_b.1);
        let ra = check_input(&a, |t, v| contract(op(v, t.constant(b.clone()))?, trial)).unwrap();
        let rb = check_input(&b, |t, v| contract(op(t.constant(a.clone()), v)?, trial)).unwrap();
        assert!(ra.max_rel_error < TOL, "{name} lhs: {} ({})", ra.max_rel_error, ra.worst);
        assert!(rb.max_rel_error < TOL, "{name} rhs: {} ({})", rb.max_rel_error, rb.worst);
    }
}

#[test]
fn elementwise_binary_ops() {
    check_binary("add", &[4, 3], &[4, 3], (-1.0, 1.0), |a, b| a.add(b));
    check_binary("add_bias", &[4, 3], &[3], (-1.0, 1.0), |a, b| a.add(b));
    check_binary("sub", &[4, 3], &[4, 3], (-1.0, 1.0), |a, b| a.sub(b));
    check_binary("mul", &[4, 3], &[4, 3], (-1.0, 1.0), |a, b| a.mul(b));
    check_binary("mul_scalar", &[4, 3], &[], (-1.0, 1.0), |a, b| a.mul(b));
    check_binary("div", &[4, 3], &[4, 3], (0.5, 1.5), |a, b| a.div(b));
}

#[test]
fn elementwise_unary_ops() {
    let s = [3, 4];
    check_unary("neg", &s, -1.0, 1.0, |x| Ok(x.neg()));
    check_unary("scale", &s, -1.0, 1.0, |x| Ok(x.scale(-2.5)));
    check_unary("add_scalar", &s, -1.0, 1.0, |x| Ok(x.add_scalar(0.3)));
    check_unary("sin", &s, -1.0, 1.0, |x| Ok(x.sin()));
    check_unary("cos", &s, -1.0, 1.0, |x| Ok(x.cos()));
    check_unary("exp", &s, -1.0, 1.0, |x| Ok(x.exp()));
    check_unary("log", &s, 0.2, 1.0, |x| Ok(x.log()));
    check_unary("sqrt", &s, 0.2, 1.0, |x| Ok(x.sqrt()));
    check_unary("square", &s, -1.0, 1.0, |x| Ok(x.square()));
    check_unary("relu", &s, -1.0, 1.0, |x| Ok(x.relu()));
    check_unary("gelu", &s, -1.0, 1.0, |x| Ok(x.gelu()));
    check_unary("sigmoid", &s, -1.0, 1.0, |x| Ok(x.sigmoid()));
    check_unary("tanh", &s, -1.0, 1.0, |x| Ok(x.tanh()));
    check_unary("clamp", &s, -1.0, 1.0, |x| Ok(x.clamp(-0.5, 0.5)));
    check_unary("rodrigues_a", &s, 0.0, 1.0, |x| Ok(x.square().rodrigues_a()));
    check_unary("rodrigues_b", &s, 0.0, 1.0, |x| Ok(x.square().rodrigues_b()));
    check_unary("rodrigues_large", &s, 1.0, 3.0, |x| x.square().rodrigues_a().add(x.square().rodrigues_b()));
}

#[test]
fn reductions() {
    let s = [3, 4, 2];
    check_unary("sum", &s, -1.0, 1.0, |x| Ok(x.sum()));
    check_unary("mean", &s, -1.0, 1.0, |x| Ok(x.mean()));
    for axis in 0..3 {
        check_unary("sum_axis", &s, -1.0, 1.0, move |x| x.sum_axis(axis));
        check_unary("mean_axis", &s, -1.0, 1.0, move |x| x.mean_axis(axis));
        check_unary("min_reduce", &s, -1.0, 1.0, move |x| x.min_reduce(axis));
    }
}

#[test]
fn shape_ops() {
    check_binary("matmul", &[4, 3], &[3, 5], (-1.0, 1.0), |a, b| a.matmul(b));
    check_binary("bmm", &[2, 4, 3], &[2, 3, 5], (-1.0, 1.0), |a, b| a.bmm(b, false));
    check_binary("bmm_t", &[2, 4, 3], &[2, 5, 3], (-1.0, 1.0), |a, b| a.bmm(b, true));
    check_unary("transpose", &[3, 5], -1.0, 1.0, |x| x.transpose());
    check_unary("reshape", &[3, 4], -1.0, 1.0, |x| x.reshape(&[2, 6]));
    check_unary("slice0", &[5, 3], -1.0, 1.0, |x| x.slice(0, 1, 4));
    check_unary("slice1", &[3, 5, 2], -1.0, 1.0, |x| x.slice(1, 2, 5));
    check_unary("gather_rows", &[5, 3], -1.0, 1.0, |x| x.gather_rows(&[4, 0, 4, 2]));
    check_unary("concat", &[3, 2], -1.0, 1.0, |x| concat(&[x, x.square(), x], 1));
    check_unary("concat0", &[3, 2], -1.0, 1.0, |x| concat(&[x, x.sin()], 0));
}

#[test]
fn normalisation_ops() {
    check_unary("softmax", &[3, 5], -1.0, 1.0, |x| x.softmax());
    check_unary("layer_norm", &[3, 6], -1.0, 1.0, |x| x.layer_norm());
    check_binary("sq_dists", &[4, 3], &[6, 3], (-1.0, 1.0), |a, b| a.sq_dists(b));
}

#[test]
fn matmul_by_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let tape = Tape::new();
    let y = tape.constant(Tensor::eye(3)).matmul(tape.constant(a.clone())).unwrap();
    assert_eq!(*y.value(), a);
}

#[test]
fn bmm_matches_per_batch_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[3, 5, 4], -1.0, 1.0);
    let tape = Tape::new();
    let y = tape.constant(a.clone()).bmm(tape.constant(b.clone()), true).unwrap();
    let y = y.value();
    for i in 0..3 {
        for r in 0..2 {
            for c in 0..5 {
                let want: f64 = (0..4).map(|p| a.data()[i * 8 + r * 4 + p] * b.data()[i * 20 + c * 4 + p]).sum();
                assert!((y.data()[i * 10 + r * 5 + c] - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::vector(&[0.0, 0.0])).softmax().unwrap();
    assert_eq!(y.value().data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::full(&[2, 5], 3.7)).layer_norm().unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradient_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[3.0]));
    let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    // the sweep consumes the tape
    assert!(tape.is_empty());
}

#[test]
fn gradient_of_matrix_vector_sum_is_column_sums() {
    let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3, 1], vec![0.1, 0.2, 0.3]).unwrap());
    let g = tape.backward(tape.constant(a).matmul(x).unwrap().sum()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[5.0, 7.0, 9.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
    assert!(matches!(tape.backward(x.square()), Err(AutodiffError::NotScalar { .. })));
}

#[test]
fn shape_errors_name_the_op() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 2]));
    let msg = a.matmul(b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    assert!(a.add(b).unwrap_err().to_string().contains("add"));
}

#[test]
fn min_reduce_ties_go_to_lowest_index() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(&[2.0, 1.0, 1.0, 3.0]));
    let g = tape.backward(x.min_reduce(0).unwrap().sum()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn untracked_graphs_record_no_backward() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(&[1.0, 2.0]));
    let y = x.square().sum();
    assert!(!y.requires_grad());
}

/// Shared body of the linearity property: an MLP-shaped graph in `x`.
fn mlp_like<'t>(x: Var<'t>, w: &Tensor) -> Result<(Var<'t>, Var<'t>), AutodiffError> {
    let t = x.tape();
    let h = x.reshape(&[1, 4])?.matmul(t.constant(w.clone()))?.gelu();
    let l1 = h.square().sum();
    let l2 = h.softmax()?.log().mean().add(x.sin().sum())?;
    Ok((l1, l2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = uniform(&mut rng, &[4], -1.0, 1.0);
        let w = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let grad = |ca: f64, cb: f64| {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let (l1, l2) = mlp_like(x, &w).unwrap();
            let l = l1.scale(ca).add(l2.scale(cb)).unwrap();
            tape.backward(l).unwrap().get(x).unwrap().clone()
        };
        let (g1, g2, g) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..4 {
            let want = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((g.data()[i] - want).abs() < 1e-12, "{} vs {}", g.data()[i], want);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = uniform(&mut rng, &[4], -1.0, 1.0);
        let w = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let run = || {
            let tape = Tape::new();
            let (l1, l2) = mlp_like(tape.leaf(x0.clone()), &w).unwrap();
            (l1.item().unwrap().to_bits(), l2.item().unwrap().to_bits())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn finite_inputs_give_finite_outputs(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let tape = Tape::new();
        let v = tape.leaf(x);
        for y in [v.softmax().unwrap(), v.layer_norm().unwrap(), v.gelu(), v.sigmoid(), v.exp(), v.sq_dists(v).unwrap()] {
            prop_assert!(y.value().is_finite());
        }
    }
}
