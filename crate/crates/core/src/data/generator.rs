//! Per-label pose recipes and the contact-moment placement of two bodies.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, InteractionLabel};
use crate::body::{capsule_sdf, forward_kinematics, joint_param_offset, mirror_params, KinematicTree, PosedBody, PARAM_DIM};
use crate::contact::{ground_truth_contacts, ContactMap};
use crate::geometry::{
    axis_angle_to_matrix, cross, dot, heading_yaw, mat_mul, mat_vec, matrix_to_axis_angle, norm, normalize, rotation_y,
    scale, sub, transpose, Mat3, Vec3, IDENTITY,
};

/// One interacting pair at the moment of contact. `partner` is normalized
/// (pelvis at the origin, zero heading) unless produced by
/// [`SampleGenerator::generate_raw`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSample {
    pub partner: Vec<f64>,
    pub interactive: Vec<f64>,
    pub label: InteractionLabel,
    pub contacts: ContactMap,
    pub seed: u64,
    pub index: u64,
    pub mirrored: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Contact distance threshold (meters).
    pub delta: f64,
    /// Attempts per sample before giving up.
    pub max_retries: usize,
    /// Std of the per-joint axis-angle jitter (radians).
    pub joint_jitter: f64,
    /// Deepest admissible vertex penetration into the partner's capsules.
    pub max_penetration: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { delta: 0.02, max_retries: 64, joint_jitter: 0.08, max_penetration: 0.03 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(DataError::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.max_retries == 0 {
            return Err(DataError::Config("max_retries must be at least 1".into()));
        }
        if !(self.joint_jitter >= 0.0 && self.max_penetration >= 0.0) {
            return Err(DataError::Config("joint_jitter and max_penetration must be non-negative".into()));
        }
        Ok(())
    }
}

/// Where the interactive body stands relative to the partner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Placement {
    /// In front, facing the partner.
    Facing,
    /// On the partner's left (+x), same heading.
    PartnerLeft,
    /// On the partner's right (−x), same heading.
    PartnerRight,
}

impl Placement {
    fn yaw(self) -> f64 {
        match self {
            Self::Facing => std::f64::consts::PI,
            _ => 0.0,
        }
    }

    /// Unit direction from the partner toward the interactive body.
    fn away(self) -> Vec3 {
        match self {
            Self::Facing => [0.0, 0.0, 1.0],
            Self::PartnerLeft => [1.0, 0.0, 0.0],
            Self::PartnerRight => [-1.0, 0.0, 0.0],
        }
    }
}

/// Upper and lower limb directions in the body frame (+z forward, +y up, +x
/// the body's left).
type LimbAim = (Vec3, Vec3);

#[derive(Clone, Copy, Debug)]
struct Pose {
    left_arm: LimbAim,
    right_arm: LimbAim,
    right_leg: Option<LimbAim>,
    /// Forward bend at the spine (radians).
    lean: f64,
}

const ARM_DOWN_LEFT: LimbAim = ([0.25, -1.0, 0.05], [0.2, -1.0, 0.15]);
const ARM_DOWN_RIGHT: LimbAim = ([-0.25, -1.0, 0.05], [-0.2, -1.0, 0.15]);
const RELAXED: Pose = Pose { left_arm: ARM_DOWN_LEFT, right_arm: ARM_DOWN_RIGHT, right_leg: None, lean: 0.0 };

/// Hand-authored construction for one label: poses, placement and the region
/// pairs (interactive, partner) of which at least one must touch.
#[derive(Clone, Copy, Debug)]
struct Recipe {
    placement: Placement,
    interactive: Pose,
    partner: Pose,
    effectors: &'static [&'static str],
    targets: &'static [&'static str],
}

fn recipe(label: InteractionLabel) -> Recipe {
    use InteractionLabel::*;
    let facing = |interactive, effectors, targets| Recipe {
        placement: Placement::Facing,
        interactive,
        partner: RELAXED,
        effectors,
        targets,
    };
    match label {
        Push => facing(
            Pose { left_arm: ([-0.25, 0.0, 1.0], [-0.15, 0.0, 1.0]), right_arm: ([0.25, 0.0, 1.0], [0.15, 0.0, 1.0]), ..RELAXED },
            &["r_hand", "l_hand"],
            &["chest", "spine"],
        ),
        Posing => Recipe {
            placement: Placement::PartnerLeft,
            interactive: Pose { right_arm: ([-1.0, 0.0, 0.1], [-1.0, -0.3, 0.1]), ..RELAXED },
            partner: RELAXED,
            effectors: &["r_hand"],
            targets: &["l_upper_arm"],
        },
        Grab => facing(Pose { right_arm: ([0.15, -0.55, 1.0], [0.1, -0.4, 1.0]), ..RELAXED }, &["r_hand"], &["l_forearm"]),
        Hug => Recipe {
            placement: Placement::Facing,
            interactive: Pose {
                left_arm: ([0.5, -0.15, 1.0], [-0.7, 0.0, 1.0]),
                right_arm: ([-0.5, -0.15, 1.0], [0.7, 0.0, 1.0]),
                right_leg: None,
                lean: 0.3,
            },
            partner: Pose { left_arm: ([0.05, -1.0, 0.05], [0.05, -1.0, 0.1]), right_arm: ([-0.05, -1.0, 0.05], [-0.05, -1.0, 0.1]), ..RELAXED },
            effectors: &["l_hand", "r_hand", "l_forearm", "r_forearm", "chest"],
            targets: &["spine", "chest", "l_upper_arm", "r_upper_arm", "l_forearm", "r_forearm"],
        },
        Kick => facing(
            Pose { right_leg: Some(([0.0, 0.3, 1.0], [0.0, 0.25, 1.0])), ..RELAXED },
            &["r_foot", "r_shin"],
            &["spine", "chest"],
        ),
        Handshake => Recipe {
            placement: Placement::Facing,
            interactive: Pose { right_arm: ([0.15, -0.5, 1.0], [0.1, -0.2, 1.0]), ..RELAXED },
            partner: Pose { right_arm: ([0.15, -0.5, 1.0], [0.1, -0.2, 1.0]), ..RELAXED },
            effectors: &["r_hand"],
            targets: &["r_hand"],
        },
        HoldingHands => Recipe {
            placement: Placement::PartnerRight,
            interactive: Pose { left_arm: ([0.5, -1.0, 0.05], [0.5, -1.0, 0.1]), ..RELAXED },
            partner: Pose { right_arm: ([-0.5, -1.0, 0.05], [-0.5, -1.0, 0.1]), ..RELAXED },
            effectors: &["l_hand"],
            targets: &["r_hand"],
        },
        Hit => facing(Pose { right_arm: ([0.1, 0.25, 1.0], [0.05, 0.3, 1.0]), ..RELAXED }, &["r_hand", "r_forearm"], &["head", "neck"]),
    }
}

/// Region pairs `(interactive, partner)` a label's construction aims for.
pub fn recipe_pairs(tree: &KinematicTree, label: InteractionLabel) -> Result<Vec<(usize, usize)>, DataError> {
    let r = recipe(label);
    let mut out = Vec::new();
    for e in r.effectors {
        for t in r.targets {
            out.push((region(tree, e)?, region(tree, t)?));
        }
    }
    Ok(out)
}

fn region(tree: &KinematicTree, name: &str) -> Result<usize, DataError> {
    tree.region_index(name)
        .ok_or_else(|| DataError::Config(format!("skeleton has no region named {name:?}; recipes need one region per capsule")))
}

/// Minimal rotation taking direction `a` onto direction `b`.
fn rotation_between(a: Vec3, b: Vec3) -> Mat3 {
    let (a, b) = (normalize(a), normalize(b));
    let axis = cross(a, b);
    let (s, c) = (norm(axis), dot(a, b));
    if s < 1e-12 {
        if c > 0.0 {
            return IDENTITY;
        }
        let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        return axis_angle_to_matrix(scale(normalize(cross(a, helper)), std::f64::consts::PI));
    }
    axis_angle_to_matrix(scale(axis, s.atan2(c) / s))
}

fn set_joint(x: &mut [f64], joint: usize, r: &Mat3) {
    let o = joint_param_offset(joint);
    x[o..o + 3].copy_from_slice(&matrix_to_axis_angle(r));
}

/// Points a two-segment limb whose rest direction is `rest`; directions are
/// in the parent joint's frame.
fn aim_limb(x: &mut [f64], upper: usize, lower: usize, rest: Vec3, aim: LimbAim) {
    let ru = rotation_between(rest, aim.0);
    set_joint(x, upper, &ru);
    set_joint(x, lower, &rotation_between(rest, mat_vec(&transpose(&ru), aim.1)));
}

fn base_params(pose: &Pose) -> Vec<f64> {
    let mut x = vec![0.0; PARAM_DIM];
    set_joint(&mut x, 1, &axis_angle_to_matrix([pose.lean, 0.0, 0.0]));
    aim_limb(&mut x, 5, 6, [1.0, 0.0, 0.0], pose.left_arm);
    aim_limb(&mut x, 8, 9, [-1.0, 0.0, 0.0], pose.right_arm);
    if let Some(leg) = pose.right_leg {
        aim_limb(&mut x, 14, 15, [0.0, -1.0, 0.0], leg);
    }
    x
}

fn gaussian(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite non-negative std")
}

/// Adds joint noise and sets the root rotation to `yaw` with a small tilt.
fn jitter<R: Rng>(x: &mut [f64], yaw: f64, sd: f64, rng: &mut R) {
    let n = gaussian(sd);
    for v in &mut x[6..] {
        *v += n.sample(rng);
    }
    let tilt = gaussian(0.5 * sd);
    let r = mat_mul(&rotation_y(yaw), &axis_angle_to_matrix([tilt.sample(rng), 0.0, tilt.sample(rng)]));
    x[3..6].copy_from_slice(&matrix_to_axis_angle(&r));
}

/// Largest advance `s ≥ 0` along `-u` after which no vertex pair of `a` and
/// `b` is closer than `gap`: the first contact of a rigid approach.
fn first_contact(a: &[Vec3], b: &[Vec3], u: Vec3, gap: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for p in a {
        for q in b {
            let w = sub(*p, *q);
            let wu = dot(w, u);
            let disc = wu * wu - dot(w, w) + gap * gap;
            if disc < 0.0 {
                continue;
            }
            let s = wu - disc.sqrt();
            if s >= 0.0 && best.is_none_or(|b| s < b) {
                best = Some(s);
            }
        }
    }
    best
}

/// Builds samples for a fixed skeleton and configuration.
#[derive(Clone, Debug)]
pub struct SampleGenerator {
    pub tree: KinematicTree,
    pub config: GeneratorConfig,
}

impl SampleGenerator {
    pub fn new(tree: KinematicTree, config: GeneratorConfig) -> Result<Self, DataError> {
        config.validate()?;
        for label in InteractionLabel::ALL {
            recipe_pairs(&tree, label)?;
        }
        Ok(Self { tree, config })
    }

    /// A pair at a random world heading and position.
    pub fn generate_raw<R: Rng>(&self, label: InteractionLabel, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>), DataError> {
        let (partner, interactive) = self.construct(label, rng)?;
        let r = rotation_y(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let t = [rng.random_range(-2.0..2.0), 0.0, rng.random_range(-2.0..2.0)];
        Ok((self.tree.transform_params(&partner, &r, t)?, self.tree.transform_params(&interactive, &r, t)?))
    }

    /// A normalized sample with its ground-truth contact map.
    pub fn generate<R: Rng>(&self, label: InteractionLabel, rng: &mut R, seed: u64, index: u64) -> Result<InteractionSample, DataError> {
        let (partner, interactive) = self.generate_raw(label, rng)?;
        let (partner, interactive) = normalize_partner(&self.tree, &partner, &interactive)?;
        let contacts = self.contacts(&partner, &interactive)?;
        if contacts.count_nonzero() == 0 {
            return Err(DataError::Construction { label, attempts: 0, reason: "contact lost in normalization".into() });
        }
        Ok(InteractionSample { partner, interactive, label, contacts, seed, index, mirrored: false })
    }

    /// Ground-truth contact map of interactive against partner.
    pub fn contacts(&self, partner: &[f64], interactive: &[f64]) -> Result<ContactMap, DataError> {
        let p = forward_kinematics(&self.tree, partner)?;
        let h = forward_kinematics(&self.tree, interactive)?;
        Ok(ground_truth_contacts(&h, &p, self.config.delta)?)
    }

    /// Partner at the origin with zero heading; interactive placed in contact.
    fn construct<R: Rng>(&self, label: InteractionLabel, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>), DataError> {
        let rec = recipe(label);
        let pairs = recipe_pairs(&self.tree, label)?;
        let sd = self.config.joint_jitter;
        let mut reason = String::new();
        for _ in 0..self.config.max_retries {
            let mut xp = base_params(&rec.partner);
            jitter(&mut xp, 0.0, sd, rng);
            let mut xh = base_params(&rec.interactive);
            jitter(&mut xh, rec.placement.yaw() + gaussian(2.0 * sd).sample(rng), sd, rng);
            let p = forward_kinematics(&self.tree, &xp)?;
            let h0 = forward_kinematics(&self.tree, &xh)?;
            let u = mat_vec(&rotation_y(gaussian(sd).sample(rng)), rec.placement.away());
            let gap = self.config.delta * rng.random_range(0.25..0.75);
            let (eff, tgt) = pairs[0];
            let shift = sub(p.region_centers[tgt], h0.region_centers[eff]);
            let mut lateral = sub(shift, scale(u, dot(shift, u)));
            let lat_noise = gaussian(0.25 * self.config.delta);
            for v in &mut lateral {
                *v += lat_noise.sample(rng);
            }
            lateral = sub(lateral, scale(u, dot(lateral, u)));
            // start well clear of the partner along u, then advance to first contact
            let clear = 4.0 + dot(shift, u);
            let start = [lateral[0] + clear * u[0], lateral[1] + clear * u[1], lateral[2] + clear * u[2]];
            let moved: Vec<Vec3> = h0.vertices.iter().map(|v| [v[0] + start[0], v[1] + start[1], v[2] + start[2]]).collect();
            let Some(s) = first_contact(&moved, &p.vertices, u, gap) else {
                reason = "approach misses the partner".into();
                continue;
            };
            for k in 0..3 {
                xh[k] += start[k] - s * u[k];
            }
            let h = forward_kinematics(&self.tree, &xh)?;
            match self.verify(&h, &p, &pairs) {
                Ok(()) => return Ok((xp, xh)),
                Err(r) => reason = r,
            }
        }
        Err(DataError::Construction { label, attempts: self.config.max_retries, reason })
    }

    fn verify(&self, h: &PosedBody, p: &PosedBody, pairs: &[(usize, usize)]) -> Result<(), String> {
        let map = ground_truth_contacts(h, p, self.config.delta).map_err(|e| e.to_string())?;
        if !pairs.iter().any(|&(i, j)| map.get(i, j) != 0.0) {
            let names = &h.partition().names;
            let hit: Vec<String> = (0..map.regions * map.regions)
                .filter(|&k| map.values[k] != 0.0)
                .map(|k| format!("{}-{}", names[k / map.regions], names[k % map.regions]))
                .collect();
            return Err(format!("first contact at [{}] instead of the recipe pair", hit.join(", ")));
        }
        let depth = h.vertices.iter().map(|&v| capsule_sdf(v, p)).fold(f64::INFINITY, f64::min);
        if depth < -self.config.max_penetration {
            return Err(format!("penetration depth {:.4} m", -depth));
        }
        Ok(())
    }
}

/// Applies the rigid motion that puts the partner's pelvis at the origin with
/// zero heading to both bodies.
pub fn normalize_partner(tree: &KinematicTree, partner: &[f64], interactive: &[f64]) -> Result<(Vec<f64>, Vec<f64>), DataError> {
    let p = forward_kinematics(tree, partner)?;
    let r = rotation_y(-heading_yaw(&p.rotations[0]));
    let t = scale(mat_vec(&r, p.pelvis()), -1.0);
    let mut xp = tree.transform_params(partner, &r, t)?;
    // the pelvis offset is exactly cancelled; remove rounding residue
    let root = tree.joints()[0].offset;
    for k in 0..3 {
        xp[k] = -root[k];
    }
    Ok((xp, tree.transform_params(interactive, &r, t)?))
}

/// Reflects a sample across the sagittal plane: both parameter vectors are
/// mirrored and left/right regions swap in the contact map.
pub fn mirror_augment(tree: &KinematicTree, s: &InteractionSample) -> InteractionSample {
    InteractionSample {
        partner: mirror_params(&s.partner),
        interactive: mirror_params(&s.interactive),
        label: s.label,
        contacts: s.contacts.mirrored(&tree.partition().mirror),
        seed: s.seed,
        index: s.index,
        mirrored: !s.mirrored,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist;
    use crate::diffusion::sample_rng;

    fn generator() -> SampleGenerator {
        SampleGenerator::new(KinematicTree::toy(), GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn rotation_between_maps_directions() {
        for (a, b) in [([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]), ([0.0, -1.0, 0.0], [0.3, 0.2, 1.0]), ([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0])] {
            let got = mat_vec(&rotation_between(a, b), normalize(a));
            let want = normalize(b);
            assert!(dist(got, want) < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn first_contact_solves_the_approach() {
        let a = [[0.0, 0.0, 5.0]];
        let b = [[0.0, 0.0, 0.0]];
        let s = first_contact(&a, &b, [0.0, 0.0, 1.0], 0.1).unwrap();
        assert!((s - 4.9).abs() < 1e-12);
        assert!(first_contact(&a, &[[1.0, 0.0, 0.0]], [0.0, 0.0, 1.0], 0.1).is_none());
    }

    #[test]
    fn every_label_constructs_its_recipe_contact() {
        let g = generator();
        for label in InteractionLabel::ALL {
            let pairs = recipe_pairs(&g.tree, label).unwrap();
            for i in 0..10 {
                let s = g.generate(label, &mut sample_rng(3, i), 3, i).unwrap();
                assert!(s.contacts.count_nonzero() >= 1);
                assert!(pairs.iter().any(|&(a, b)| s.contacts.get(a, b) == 1.0), "{label} sample {i}");
            }
        }
    }

    #[test]
    fn handshake_touches_right_hands() {
        let g = generator();
        let r = g.tree.region_index("r_hand").unwrap();
        let s = g.generate(InteractionLabel::Handshake, &mut sample_rng(0, 0), 0, 0).unwrap();
        assert_eq!(s.contacts.get(r, r), 1.0);
    }

    #[test]
    fn normalization_is_rigid_and_canonical() {
        let g = generator();
        let mut rng = sample_rng(9, 1);
        let (xp, xh) = g.generate_raw(InteractionLabel::Hug, &mut rng).unwrap();
        let (np, nh) = normalize_partner(&g.tree, &xp, &xh).unwrap();
        let (bp, bh) = (forward_kinematics(&g.tree, &xp).unwrap(), forward_kinematics(&g.tree, &xh).unwrap());
        let (ap, ah) = (forward_kinematics(&g.tree, &np).unwrap(), forward_kinematics(&g.tree, &nh).unwrap());
        assert_eq!(&np[..3], &[0.0, 0.0, 0.0]);
        assert!(heading_yaw(&ap.rotations[0]).abs() < 1e-12);
        for (i, (p0, p1)) in bp.vertices.iter().zip(&ap.vertices).enumerate().step_by(7) {
            for (h0, h1) in bh.vertices.iter().zip(&ah.vertices).skip(i % 5).step_by(5) {
                assert!((dist(*p0, *h0) - dist(*p1, *h1)).abs() < 1e-9);
            }
        }
        assert_eq!(g.contacts(&xp, &xh).unwrap(), g.contacts(&np, &nh).unwrap());
    }

    #[test]
    fn mirror_is_an_involution_that_keeps_contact() {
        let g = generator();
        let r_hand = g.tree.region_index("r_hand").unwrap();
        let l_hand = g.tree.region_index("l_hand").unwrap();
        let s = g.generate(InteractionLabel::Handshake, &mut sample_rng(1, 4), 1, 4).unwrap();
        assert_eq!(s.contacts.get(r_hand, r_hand), 1.0);
        let m = mirror_augment(&g.tree, &s);
        assert!(m.mirrored);
        assert_eq!(m.contacts.get(l_hand, l_hand), 1.0);
        assert_eq!(g.contacts(&m.partner, &m.interactive).unwrap(), m.contacts);
        assert_eq!(mirror_augment(&g.tree, &m), s);
    }

    #[test]
    fn failure_reports_the_label() {
        let cfg = GeneratorConfig { max_retries: 1, max_penetration: 0.0, delta: 1e-9, ..GeneratorConfig::default() };
        let g = SampleGenerator::new(KinematicTree::toy(), cfg).unwrap();
        let err = (0..20).find_map(|i| g.generate(InteractionLabel::Hug, &mut sample_rng(0, i), 0, i).err());
        assert!(matches!(err, Some(DataError::Construction { label: InteractionLabel::Hug, .. })), "{err:?}");
    }
}
