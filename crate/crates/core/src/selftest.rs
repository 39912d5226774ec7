//! Fast invariant suite run by the `selftest` command: gradient checks,
//! schedule algebra, distance oracles, the guidance off-switch and data
//! symmetries, each on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{central_difference, check_parameters, FD_STEP};
use crate::autodiff::{AutodiffError, Tensor};
use crate::body::{forward_kinematics, mirror_params, KinematicTree, PARAM_DIM};
use crate::contact::{ContactConfig, ContactInput, ContactPredictor};
use crate::data::{mirror_augment, InteractionLabel, SampleGenerator, GeneratorConfig};
use crate::denoiser::{CondMask, DenoiseBatch, Denoiser, DenoiserConfig};
use crate::diffusion::{sample_batch, sample_rng, DiffusionConfig, Guide, DiffusionError, SampleOptions};
use crate::guidance::{chamfer, objective_gradient};
use crate::metrics::{fit_gaussian, frechet_distance, ClassifierConfig, FeatureClassifier, GaussianStats, INPUT_DIM};

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn() -> Result<(bool, String), String>;

const CHECKS: [(&str, CheckFn); 10] = [
    ("denoiser_gradients", denoiser_gradients),
    ("contact_gradients", contact_gradients),
    ("classifier_gradients", classifier_gradients),
    ("guidance_gradient", guidance_gradient),
    ("schedule_algebra", schedule_algebra),
    ("zero_lambda_off_switch", zero_lambda_off_switch),
    ("chamfer_oracle", chamfer_oracle),
    ("frechet_closed_form", frechet_closed_form),
    ("mirror_involution", mirror_involution),
    ("dataset_contacts", dataset_contacts),
];

/// Runs every check; an error inside a check counts as a failure.
pub fn run_selftest() -> Vec<SelfCheck> {
    CHECKS
        .iter()
        .map(|&(name, f)| match f() {
            Ok((passed, detail)) => SelfCheck { name, passed, detail },
            Err(detail) => SelfCheck { name, passed: false, detail },
        })
        .collect()
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_params(rng: &mut ChaCha8Rng, spread: f64) -> Vec<f64> {
    (0..PARAM_DIM).map(|_| rng.random_range(-spread..spread)).collect()
}

fn denoiser_gradients() -> Result<(bool, String), String> {
    let net = Denoiser::new(DenoiserConfig { width: 12, blocks: 2, time_dim: 8, label_dim: 4, partner_dim: 6, ..DenoiserConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = net.init(&mut rng);
    let x = Tensor::new(&[2, PARAM_DIM], random_params(&mut rng, 1.0).into_iter().chain(random_params(&mut rng, 1.0)).collect()).map_err(err)?;
    let p = Tensor::new(&[2, PARAM_DIM], random_params(&mut rng, 1.0).into_iter().chain(random_params(&mut rng, 1.0)).collect()).map_err(err)?;
    let (t, l, masks) = (vec![3, 700], vec![1, 6], [CondMask::FULL, CondMask::LABEL_ONLY]);
    let r = check_parameters(
        &store,
        |tape, b| Ok(net.forward(tape, b, &DenoiseBatch { x_t: &x, t: &t, partners: &p, labels: &l, masks: &masks })?.square().mean()),
        4,
        &mut rng,
    )
    .map_err(err)?;
    Ok((r.max_rel_error < 1e-4, format!("max_rel_error={:e} probes={}", r.max_rel_error, r.probes)))
}

fn contact_gradients() -> Result<(bool, String), String> {
    let tree = KinematicTree::toy();
    let net = ContactPredictor::new(ContactConfig { dim: 8, heads: 2, blocks: 1, ..ContactConfig::default() }, tree.num_regions());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = net.init(&mut rng);
    let (h, p) = (forward_kinematics(&tree, &random_params(&mut rng, 0.4)).map_err(err)?, forward_kinematics(&tree, &random_params(&mut rng, 0.4)).map_err(err)?);
    let inputs = [ContactInput::from_bodies(&h, &p, 3).map_err(err)?];
    let r = check_parameters(
        &store,
        |tape, b| {
            let probs = net.forward(tape, b, &inputs).map_err(|e| AutodiffError::Format(e.to_string()))?;
            Ok(probs.square().mean())
        },
        3,
        &mut rng,
    )
    .map_err(err)?;
    Ok((r.max_rel_error < 1e-4, format!("max_rel_error={:e} probes={}", r.max_rel_error, r.probes)))
}

fn classifier_gradients() -> Result<(bool, String), String> {
    let net = FeatureClassifier::new(ClassifierConfig { hidden: 10, feature_dim: 6 });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = net.init(&mut rng);
    let x = Tensor::new(&[2, INPUT_DIM], (0..2 * INPUT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(err)?;
    let r = check_parameters(
        &store,
        |tape, b| {
            let (_, logits) = net.forward(b, tape.constant(x.clone()))?;
            Ok(logits.square().mean())
        },
        4,
        &mut rng,
    )
    .map_err(err)?;
    Ok((r.max_rel_error < 1e-4, format!("max_rel_error={:e} probes={}", r.max_rel_error, r.probes)))
}

fn guidance_gradient() -> Result<(bool, String), String> {
    let tree = KinematicTree::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xh = random_params(&mut rng, 0.4);
    let mut xp = random_params(&mut rng, 0.4);
    xp[2] += 0.6;
    let p = forward_kinematics(&tree, &xp).map_err(err)?;
    let pairs = [(13, 3), (2, 7)];
    let (_, g) = objective_gradient(&tree, &xh, &p, &pairs).map_err(err)?;
    let f = |x: &[f64]| objective_gradient(&tree, x, &p, &pairs).map(|r| r.0).unwrap_or(f64::NAN);
    let worst = (0..PARAM_DIM)
        .map(|i| crate::autodiff::gradcheck::relative_error(g[i], central_difference(f, &xh, i, FD_STEP)))
        .fold(0.0, f64::max);
    Ok((worst < 1e-4, format!("max_rel_error={worst:e}")))
}

fn schedule_algebra() -> Result<(bool, String), String> {
    let sched = DiffusionConfig::default().schedule().map_err(err)?;
    let recursion = (1..=sched.steps()).map(|t| (sched.alpha_bar(t) - sched.alpha_bar(t - 1) * sched.alpha(t)).abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut roundtrip: f64 = 0.0;
    for t in [1, 250, 500, 1000] {
        let x0 = random_params(&mut rng, 1.0);
        let eps = random_params(&mut rng, 2.0);
        let xt = sched.q_sample(&x0, t, &eps).map_err(err)?;
        let back = sched.predict_x0(&xt, t, &eps).map_err(err)?;
        roundtrip = x0.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(roundtrip, f64::max);
    }
    Ok((recursion <= 1e-15 && roundtrip <= 1e-10, format!("recursion={recursion:e} roundtrip={roundtrip:e}")))
}

struct Constant;
impl Guide for Constant {
    fn gradients(&self, x0: &[Vec<f64>], _: &[Vec<f64>], _: &[usize], _: usize) -> Result<Vec<Vec<f64>>, DiffusionError> {
        Ok(vec![vec![1.0; PARAM_DIM]; x0.len()])
    }
}

fn zero_lambda_off_switch() -> Result<(bool, String), String> {
    let net = Denoiser::new(DenoiserConfig { width: 16, blocks: 1, time_dim: 8, label_dim: 4, partner_dim: 8, ..DenoiserConfig::default() });
    let store = net.init(&mut ChaCha8Rng::seed_from_u64(6));
    let dc = DiffusionConfig { steps: 40, ..DiffusionConfig::default() };
    let sched = dc.schedule().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let partners = vec![random_params(&mut rng, 0.5), random_params(&mut rng, 0.5)];
    let opts = SampleOptions { seed: 9, ..SampleOptions::default() };
    let plain = sample_batch(&net, &store, &sched, &dc.timesteps(), &partners, &[2, 5], 0, None, &opts).map_err(err)?;
    let zero = sample_batch(&net, &store, &sched, &dc.timesteps(), &partners, &[2, 5], 0, Some(&Constant), &opts).map_err(err)?;
    let bits = |s: &[Vec<f64>]| s.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&plain.samples) == bits(&zero.samples);
    Ok((same, format!("bitwise_equal={same}")))
}

fn chamfer_oracle() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut pts = |n: usize| -> Vec<[f64; 3]> { (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect() };
        let (a, b) = (pts(1 + 7), pts(13));
        let one_way = |a: &[[f64; 3]], b: &[[f64; 3]]| {
            a.iter()
                .map(|p| b.iter().map(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / a.len() as f64
        };
        let brute = one_way(&a, &b) + one_way(&b, &a);
        worst = worst.max((chamfer(&a, &b).map_err(err)? - brute).abs());
    }
    Ok((worst == 0.0, format!("max_abs_diff={worst:e}")))
}

fn frechet_closed_form() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 4;
    let diag = |rng: &mut ChaCha8Rng| {
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..2.0)).collect();
        let mut cov = vec![0.0; d * d];
        (0..d).for_each(|i| cov[i * d + i] = var[i]);
        (GaussianStats { mean: mean.clone(), cov, count: 2 }, mean, var)
    };
    let (g1, m1, v1) = diag(&mut rng);
    let (g2, m2, v2) = diag(&mut rng);
    let expected: f64 = (0..d).map(|i| (m1[i] - m2[i]).powi(2) + v1[i] + v2[i] - 2.0 * (v1[i] * v2[i]).sqrt()).sum();
    let got = frechet_distance(&g1, &g2).map_err(err)?;
    let feats: Vec<Vec<f64>> = (0..30).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let fit = fit_gaussian(&feats).map_err(err)?;
    let selfd = frechet_distance(&fit, &fit).map_err(err)?;
    Ok(((got - expected).abs() < 1e-9 && selfd.abs() < 1e-9, format!("closed_form_diff={:e} self={selfd:e}", (got - expected).abs())))
}

fn mirror_involution() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ok = true;
    for _ in 0..20 {
        let x = random_params(&mut rng, 1.0);
        ok &= mirror_params(&mirror_params(&x)).iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    Ok((ok, format!("bitwise_involution={ok}")))
}

fn dataset_contacts() -> Result<(bool, String), String> {
    let tree = KinematicTree::toy();
    let gen = SampleGenerator::new(tree.clone(), GeneratorConfig::default()).map_err(err)?;
    let mut ok = true;
    for (k, label) in InteractionLabel::ALL.into_iter().enumerate() {
        let s = gen.generate(label, &mut sample_rng(11, k as u64), 11, k as u64).map_err(err)?;
        let m = mirror_augment(&tree, &s);
        ok &= s.contacts.count_nonzero() > 0;
        ok &= gen.contacts(&s.partner, &s.interactive).map_err(err)? == s.contacts;
        ok &= gen.contacts(&m.partner, &m.interactive).map_err(err)? == m.contacts;
        ok &= mirror_augment(&tree, &m) == s;
    }
    Ok((ok, format!("labels_checked={}", InteractionLabel::ALL.len())))
}
