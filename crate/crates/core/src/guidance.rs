//! Contact guidance: a Chamfer objective over predicted contact region pairs,
//! its gradient through forward kinematics, and the sampler hook that applies
//! it at every denoising step.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParameterStore, Tape, Tensor, Var};
use crate::body::{forward_kinematics, vertices_on_tape, BodyError, KinematicTree, PosedBody, PARAM_DIM};
use crate::contact::{threshold_contacts, ContactError, ContactInput, ContactPredictor};
use crate::diffusion::{DiffusionError, Guide};
use crate::geometry::{sub, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("chamfer distance of an empty point set")]
    EmptySet,
    #[error("invalid guidance configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl From<GuidanceError> for DiffusionError {
    fn from(e: GuidanceError) -> Self {
        DiffusionError::Guidance(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Step size per parameter segment: translation, root, body, hands.
    pub lambda: [f64; 4],
    /// Gradient steps per denoising step.
    pub inner_iters: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda: [0.05, 0.05, 0.05, 0.05], inner_iters: 1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(GuidanceError::Config(format!("lambda entries must be finite and >= 0, got {:?}", self.lambda)));
        }
        if self.inner_iters == 0 {
            return Err(GuidanceError::Config("inner_iters must be at least 1".into()));
        }
        Ok(())
    }
}

fn sq(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// `mean_{a∈A} min_{b∈B} ‖a − b‖²`.
pub fn chamfer_one_way(a: &[Vec3], b: &[Vec3]) -> Result<f64, GuidanceError> {
    if a.is_empty() || b.is_empty() {
        return Err(GuidanceError::EmptySet);
    }
    let total: f64 = a.iter().map(|&p| b.iter().map(|&q| sq(p, q)).fold(f64::INFINITY, f64::min)).sum();
    Ok(total / a.len() as f64)
}

/// Symmetric squared Chamfer distance, mean-reduced in each direction.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64, GuidanceError> {
    Ok(chamfer_one_way(a, b)? + chamfer_one_way(b, a)?)
}

fn chamfer_on_tape<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, AutodiffError> {
    let d = a.sq_dists(b)?;
    d.min_reduce(1)?.mean().add(d.min_reduce(0)?.mean())
}

/// Sum of symmetric Chamfer distances over the region pairs `(i, j)` between
/// region `i` of `h` and region `j` of `p`; zero for no pairs.
pub fn contact_objective_posed(h: &PosedBody, p: &PosedBody, pairs: &[(usize, usize)]) -> Result<f64, GuidanceError> {
    pairs.iter().try_fold(0.0, |acc, &(i, j)| Ok(acc + chamfer(h.region_vertices(i)?, p.region_vertices(j)?)?))
}

/// Contact objective of parameter vectors `xh` and `xp`.
pub fn contact_objective(tree: &KinematicTree, xh: &[f64], xp: &[f64], pairs: &[(usize, usize)]) -> Result<f64, GuidanceError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    contact_objective_posed(&forward_kinematics(tree, xh)?, &forward_kinematics(tree, xp)?, pairs)
}

/// Objective value and its gradient with respect to `xh`, with the partner
/// fixed.
pub fn objective_gradient(
    tree: &KinematicTree,
    xh: &[f64],
    partner: &PosedBody,
    pairs: &[(usize, usize)],
) -> Result<(f64, Vec<f64>), GuidanceError> {
    if xh.len() != PARAM_DIM {
        return Err(BodyError::ParamLength(xh.len()).into());
    }
    if pairs.is_empty() {
        return Ok((0.0, vec![0.0; PARAM_DIM]));
    }
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(xh));
    let verts = vertices_on_tape(tree, x)?;
    let part = tree.partition();
    let mut total: Option<Var<'_>> = None;
    for &(i, j) in pairs {
        let r = part.ranges.get(i).ok_or(BodyError::InvalidRegion { region: i, count: part.num_regions() })?;
        let a = verts.slice(0, r.start, r.end)?;
        let pv = partner.region_vertices(j)?;
        let b = tape.constant(Tensor::new(&[pv.len(), 3], pv.iter().flatten().copied().collect())?);
        let c = chamfer_on_tape(a, b)?;
        total = Some(match total {
            None => c,
            Some(t) => t.add(c)?,
        });
    }
    let total = total.expect("pairs is non-empty");
    let value = total.item()?;
    let grads = tape.backward(total)?;
    Ok((value, grads.get_or_zeros(x, &[PARAM_DIM]).into_data()))
}

/// One guidance evaluation: the predicted pair set, the objective and its
/// gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceStep {
    pub pairs: Vec<(usize, usize)>,
    pub objective: f64,
    pub gradient: Vec<f64>,
}

/// Predicts the contact set from `x0` and the partner, then differentiates
/// the contact objective with the set held fixed.
pub fn guidance_gradient(
    tree: &KinematicTree,
    predictor: &ContactPredictor,
    store: &ParameterStore,
    tau: f64,
    x0: &[f64],
    xp: &[f64],
    label: usize,
) -> Result<GuidanceStep, GuidanceError> {
    let (h, p) = (forward_kinematics(tree, x0)?, forward_kinematics(tree, xp)?);
    let map = predictor.predict_bodies(store, &h, &p, label)?;
    let pairs = threshold_contacts(&map, tau)?;
    let (objective, gradient) = objective_gradient(tree, x0, &p, &pairs)?;
    Ok(GuidanceStep { pairs, objective, gradient })
}

/// Contact sets and objectives seen at one denoising step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub pairs: Vec<Vec<(usize, usize)>>,
    pub objectives: Vec<f64>,
}

/// Sampler hook: predicts contacts for the whole batch at once and returns
/// per-sample objective gradients. Optionally keeps every step's contact sets.
pub struct ContactGuide<'a> {
    pub tree: &'a KinematicTree,
    pub predictor: &'a ContactPredictor,
    pub store: &'a ParameterStore,
    pub tau: f64,
    history: Option<RefCell<Vec<StepRecord>>>,
}

impl<'a> ContactGuide<'a> {
    pub fn new(tree: &'a KinematicTree, predictor: &'a ContactPredictor, store: &'a ParameterStore, tau: f64) -> Self {
        Self { tree, predictor, store, tau, history: None }
    }

    pub fn recording(mut self) -> Self {
        self.history = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn take_history(&self) -> Vec<StepRecord> {
        self.history.as_ref().map(|h| h.take()).unwrap_or_default()
    }

    fn evaluate(&self, x0: &[Vec<f64>], partners: &[Vec<f64>], labels: &[usize], t: usize) -> Result<Vec<Vec<f64>>, GuidanceError> {
        let hs = x0.iter().map(|x| forward_kinematics(self.tree, x)).collect::<Result<Vec<_>, _>>()?;
        let ps = partners.iter().map(|x| forward_kinematics(self.tree, x)).collect::<Result<Vec<_>, _>>()?;
        let inputs = hs
            .iter()
            .zip(&ps)
            .zip(labels)
            .map(|((h, p), &l)| ContactInput::from_bodies(h, p, l))
            .collect::<Result<Vec<_>, _>>()?;
        let maps = self.predictor.predict(self.store, &inputs)?;
        let mut record = StepRecord { t, pairs: Vec::new(), objectives: Vec::new() };
        let mut grads = Vec::with_capacity(x0.len());
        for ((x, p), map) in x0.iter().zip(&ps).zip(&maps) {
            let pairs = threshold_contacts(map, self.tau)?;
            let (value, g) = objective_gradient(self.tree, x, p, &pairs)?;
            grads.push(g);
            if self.history.is_some() {
                record.pairs.push(pairs);
                record.objectives.push(value);
            }
        }
        if let Some(h) = &self.history {
            h.borrow_mut().push(record);
        }
        Ok(grads)
    }
}

impl Guide for ContactGuide<'_> {
    fn gradients(&self, x0: &[Vec<f64>], partners: &[Vec<f64>], labels: &[usize], t: usize) -> Result<Vec<Vec<f64>>, DiffusionError> {
        Ok(self.evaluate(x0, partners, labels, t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_difference, relative_error};
    use crate::contact::ContactConfig;
    use crate::diffusion::apply_guidance;
    use crate::geometry::axis_angle_to_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x: Vec<f64> = (0..PARAM_DIM).map(|_| rng.random_range(-0.5..0.5)).collect();
        x[..3].iter_mut().for_each(|v| *v *= 0.4);
        x
    }

    fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
        let mut s1 = 0.0;
        for p in a {
            let mut m = f64::INFINITY;
            for q in b {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < m {
                    m = d;
                }
            }
            s1 += m;
        }
        let mut s2 = 0.0;
        for q in b {
            let mut m = f64::INFINITY;
            for p in a {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < m {
                    m = d;
                }
            }
            s2 += m;
        }
        s1 / a.len() as f64 + s2 / b.len() as f64
    }

    #[test]
    fn chamfer_reference_values() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0]];
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer_one_way(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer(&b, &b).unwrap(), 0.0);
        assert!(matches!(chamfer(&[], &b), Err(GuidanceError::EmptySet)));
    }

    proptest! {
        #[test]
        fn chamfer_matches_brute_force(seed in any::<u64>(), n in 1usize..12, m in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = |k: usize| -> Vec<Vec3> { (0..k).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect() };
            let (a, b) = (pts(n), pts(m));
            prop_assert!((chamfer(&a, &b).unwrap() - brute_chamfer(&a, &b)).abs() < 1e-12);
            let tape = Tape::new();
            let ta = tape.constant(Tensor::new(&[n, 3], a.iter().flatten().copied().collect()).unwrap());
            let tb = tape.constant(Tensor::new(&[m, 3], b.iter().flatten().copied().collect()).unwrap());
            prop_assert!((chamfer_on_tape(ta, tb).unwrap().item().unwrap() - brute_chamfer(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_special_cases_and_oracle() {
        let tree = KinematicTree::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (xh, xp) = (random_params(&mut rng), random_params(&mut rng));
        assert_eq!(contact_objective(&tree, &xh, &xp, &[]).unwrap(), 0.0);
        assert_eq!(contact_objective(&tree, &xh, &xh, &[(3, 3)]).unwrap(), 0.0);
        let pairs = [(9, 9), (2, 5), (12, 0)];
        let (h, p) = (forward_kinematics(&tree, &xh).unwrap(), forward_kinematics(&tree, &xp).unwrap());
        let want: f64 = pairs.iter().map(|&(i, j)| brute_chamfer(h.region_vertices(i).unwrap(), p.region_vertices(j).unwrap())).sum();
        assert!((contact_objective(&tree, &xh, &xp, &pairs).unwrap() - want).abs() < 1e-10);
        let (v, g) = objective_gradient(&tree, &xh, &p, &pairs).unwrap();
        assert!((v - want).abs() < 1e-10);
        assert_eq!(g.len(), PARAM_DIM);
        let (v0, g0) = objective_gradient(&tree, &xh, &p, &[]).unwrap();
        assert_eq!(v0, 0.0);
        assert!(g0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let tree = KinematicTree::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let (xh, xp) = (random_params(&mut rng), random_params(&mut rng));
            let pairs = [(9, 9), (5, 2)];
            let p = forward_kinematics(&tree, &xp).unwrap();
            let (_, g) = objective_gradient(&tree, &xh, &p, &pairs).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..PARAM_DIM {
                let fd = central_difference(|x| contact_objective(&tree, x, &xp, &pairs).unwrap(), &xh, i, 1e-5);
                worst = worst.max(relative_error(g[i], fd));
            }
            assert!(worst < 1e-4, "{worst}");
        }
    }

    #[test]
    fn translation_gradient_points_toward_the_partner() {
        let tree = KinematicTree::toy();
        let head = tree.region_index("head").unwrap();
        let xp = vec![0.0; PARAM_DIM];
        let p = forward_kinematics(&tree, &xp).unwrap();
        for dx in [-0.5, 0.5] {
            let mut xh = vec![0.0; PARAM_DIM];
            xh[0] = dx;
            let (_, g) = objective_gradient(&tree, &xh, &p, &[(head, head)]).unwrap();
            // separated along x only: the x component dominates and carries the sign of dx
            assert!(g[0] * dx > 0.0, "{}", g[0]);
            assert!(g[0].abs() > 10.0 * g[1].abs().max(g[2].abs()), "{g:?}");
            let stepped = apply_guidance(&xh, &g, &[0.1, 0.0, 0.0, 0.0]).unwrap();
            assert!(stepped[0].abs() < dx.abs());
        }
    }

    #[test]
    fn small_steps_never_increase_the_objective() {
        let tree = KinematicTree::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (xh, xp) = (random_params(&mut rng), random_params(&mut rng));
            let pairs = [(rng.random_range(0..16), rng.random_range(0..16))];
            let p = forward_kinematics(&tree, &xp).unwrap();
            let (before, g) = objective_gradient(&tree, &xh, &p, &pairs).unwrap();
            let mut lambda = 1.0;
            let mut found = false;
            for _ in 0..40 {
                let after = contact_objective(&tree, &apply_guidance(&xh, &g, &[lambda; 4]).unwrap(), &xp, &pairs).unwrap();
                if after <= before {
                    found = true;
                    // every smaller uniform step also descends
                    for k in 1..=5 {
                        let l = lambda / f64::from(1 << k);
                        let a = contact_objective(&tree, &apply_guidance(&xh, &g, &[l; 4]).unwrap(), &xp, &pairs).unwrap();
                        assert!(a <= before);
                    }
                    break;
                }
                lambda *= 0.5;
            }
            assert!(found);
        }
    }

    #[test]
    fn objective_is_invariant_under_common_rigid_motion() {
        let tree = KinematicTree::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = axis_angle_to_matrix([0.2, 0.9, -0.4]);
        let t = [1.0, -0.3, 0.6];
        for _ in 0..3 {
            let (xh, xp) = (random_params(&mut rng), random_params(&mut rng));
            let pairs = [(9, 3), (0, 1), (15, 15)];
            let a = contact_objective(&tree, &xh, &xp, &pairs).unwrap();
            let (mh, mp) = (tree.transform_params(&xh, &r, t).unwrap(), tree.transform_params(&xp, &r, t).unwrap());
            let b = contact_objective(&tree, &mh, &mp, &pairs).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn guide_reports_zero_gradient_without_contacts() {
        let tree = KinematicTree::toy();
        let predictor = ContactPredictor::new(ContactConfig::default(), tree.num_regions());
        let mut store = predictor.init(&mut ChaCha8Rng::seed_from_u64(0));
        // a strongly negative bias makes every probability tiny
        store.set("contact.out_bias", Tensor::vector(&[-50.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (xh, xp) = (random_params(&mut rng), random_params(&mut rng));
        let step = guidance_gradient(&tree, &predictor, &store, 0.5, &xh, &xp, 0).unwrap();
        assert!(step.pairs.is_empty());
        assert!(step.gradient.iter().all(|&g| g == 0.0));
        // and a strongly positive one selects every pair
        store.set("contact.out_bias", Tensor::vector(&[50.0])).unwrap();
        let guide = ContactGuide::new(&tree, &predictor, &store, 0.5).recording();
        let g = guide.gradients(std::slice::from_ref(&xh), std::slice::from_ref(&xp), &[0], 7).unwrap();
        let hist = guide.take_history();
        assert_eq!(hist.len(), 1);
        assert_eq!(hist[0].t, 7);
        assert_eq!(hist[0].pairs[0].len(), 256);
        let all: Vec<(usize, usize)> = (0..16).flat_map(|i| (0..16).map(move |j| (i, j))).collect();
        let (_, want) = objective_gradient(&tree, &xh, &forward_kinematics(&tree, &xp).unwrap(), &all).unwrap();
        assert_eq!(g[0], want);
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        assert!(GuidanceConfig { lambda: [0.0, -1.0, 0.0, 0.0], ..GuidanceConfig::default() }.validate().is_err());
        assert!(GuidanceConfig { inner_iters: 0, ..GuidanceConfig::default() }.validate().is_err());
    }
}
