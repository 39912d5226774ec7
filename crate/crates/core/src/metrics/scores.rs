//! Per-sample geometric scores: contact closeness and non-collision.

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::body::{capsule_sdf, PosedBody};
use crate::data::{InteractionLabel, InteractionSample, NUM_LABELS};
use crate::guidance::chamfer_one_way;

/// Per-label region pairs that touch in at least `threshold` of that label's
/// training samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub threshold: f64,
    pub regions: usize,
    /// Training samples per label code.
    pub counts: Vec<usize>,
    /// `(interactive region, partner region, frequency)` per label code.
    pub pairs: Vec<Vec<(usize, usize, f64)>>,
}

impl RegionStats {
    pub fn build<'a>(samples: impl IntoIterator<Item = &'a InteractionSample>, regions: usize, threshold: f64) -> Result<Self, MetricsError> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(MetricsError::Config(format!("frequency threshold must be in (0, 1], got {threshold}")));
        }
        let mut counts = vec![0usize; NUM_LABELS];
        let mut hits = vec![vec![0usize; regions * regions]; NUM_LABELS];
        for s in samples {
            if s.contacts.regions != regions {
                return Err(MetricsError::Dimension { expected: regions, got: s.contacts.regions });
            }
            let l = s.label.code();
            counts[l] += 1;
            for (h, v) in hits[l].iter_mut().zip(&s.contacts.values) {
                if *v != 0.0 {
                    *h += 1;
                }
            }
        }
        let pairs = (0..NUM_LABELS)
            .map(|l| {
                (0..regions * regions)
                    .filter_map(|k| {
                        let f = hits[l][k] as f64 / counts[l].max(1) as f64;
                        (counts[l] > 0 && f >= threshold).then_some((k / regions, k % regions, f))
                    })
                    .collect()
            })
            .collect();
        Ok(Self { threshold, regions, counts, pairs })
    }

    /// Potential contact pairs of `label`.
    pub fn potential(&self, label: InteractionLabel) -> Result<Vec<(usize, usize)>, MetricsError> {
        let pairs: Vec<(usize, usize)> = self.pairs[label.code()].iter().map(|&(i, j, _)| (i, j)).collect();
        if pairs.is_empty() {
            return Err(MetricsError::NoPotentialRegions(label));
        }
        Ok(pairs)
    }
}

/// One-way squared Chamfer from the interactive region to the partner region,
/// minimised over the label's potential contact pairs. A sample that realises
/// any of its label's contacts scores near zero.
pub fn contact_score(h: &PosedBody, p: &PosedBody, pairs: &[(usize, usize)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Config("contact score needs at least one region pair".into()));
    }
    let mut best = f64::INFINITY;
    for &(i, j) in pairs {
        best = best.min(chamfer_one_way(h.region_vertices(i)?, p.region_vertices(j)?)?);
    }
    Ok(best)
}

/// Percentage of interactive vertices outside every partner capsule.
pub fn non_collision_score(h: &PosedBody, p: &PosedBody) -> f64 {
    let outside = h.vertices.iter().filter(|&&v| capsule_sdf(v, p) > 0.0).count();
    100.0 * outside as f64 / h.vertices.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{forward_kinematics, KinematicTree, PARAM_DIM};
    use crate::contact::ContactMap;
    use crate::data::{GeneratorConfig, SampleGenerator};
    use crate::diffusion::sample_rng;
    use crate::guidance::chamfer;

    fn shifted(x: &[f64], dz: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        y[2] += dz;
        y
    }

    #[test]
    fn region_stats_threshold_frequencies() {
        let mk = |label, pairs: &[(usize, usize)]| {
            let mut m = ContactMap::zeros(4);
            for &(i, j) in pairs {
                m.set(i, j, 1.0);
            }
            InteractionSample { partner: vec![], interactive: vec![], label, contacts: m, seed: 0, index: 0, mirrored: false }
        };
        let push = InteractionLabel::Push;
        let data = [mk(push, &[(0, 1)]), mk(push, &[(0, 1), (2, 2)]), mk(push, &[(0, 1)]), mk(push, &[(3, 3)]), mk(push, &[(0, 1)])];
        let s = RegionStats::build(&data, 4, 0.2).unwrap();
        assert_eq!(s.counts[0], 5);
        assert_eq!(s.pairs[0], vec![(0, 1, 0.8), (2, 2, 0.2), (3, 3, 0.2)]);
        assert_eq!(RegionStats::build(&data, 4, 0.5).unwrap().potential(push).unwrap(), vec![(0, 1)]);
        assert!(matches!(s.potential(InteractionLabel::Hug), Err(MetricsError::NoPotentialRegions(_))));
    }

    #[test]
    fn contact_score_grows_with_separation() {
        let g = SampleGenerator::new(KinematicTree::toy(), GeneratorConfig::default()).unwrap();
        let s = g.generate(InteractionLabel::Push, &mut sample_rng(2, 0), 2, 0).unwrap();
        let pairs: Vec<(usize, usize)> = (0..16 * 16).filter(|&k| s.contacts.values[k] != 0.0).map(|k| (k / 16, k % 16)).collect();
        let p = forward_kinematics(&g.tree, &s.partner).unwrap();
        let mut last = -1.0;
        // the interactive body faces the partner from +z
        for d in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8] {
            let h = forward_kinematics(&g.tree, &shifted(&s.interactive, d)).unwrap();
            let score = contact_score(&h, &p, &pairs).unwrap();
            assert!(score > last, "{d}: {score} <= {last}");
            last = score;
            for &(i, j) in &pairs {
                assert!(score <= chamfer(h.region_vertices(i).unwrap(), p.region_vertices(j).unwrap()).unwrap());
            }
        }
    }

    #[test]
    fn exemplars_in_contact_score_near_zero() {
        let g = SampleGenerator::new(KinematicTree::toy(), GeneratorConfig::default()).unwrap();
        for (k, label) in InteractionLabel::ALL.into_iter().enumerate() {
            let s = g.generate(label, &mut sample_rng(3, k as u64), 3, k as u64).unwrap();
            let h = forward_kinematics(&g.tree, &s.interactive).unwrap();
            let p = forward_kinematics(&g.tree, &s.partner).unwrap();
            // the label's construction pairs, of which only some touch
            let pairs = crate::data::recipe_pairs(&g.tree, label).unwrap();
            let score = contact_score(&h, &p, &pairs).unwrap();
            assert!(score < 0.03, "{}: {score}", label.name());
            let far = forward_kinematics(&g.tree, &shifted(&s.interactive, 1.0)).unwrap();
            assert!(contact_score(&far, &p, &pairs).unwrap() > 10.0 * score);
        }
    }

    #[test]
    fn non_collision_extremes_and_recount() {
        let tree = KinematicTree::toy();
        let rest = tree.rest_pose();
        let mut far = vec![0.0; PARAM_DIM];
        far[0] = 10.0;
        assert_eq!(non_collision_score(&forward_kinematics(&tree, &far).unwrap(), &rest), 100.0);
        let mut giant = rest.clone();
        for c in &mut giant.capsules {
            c.radius = 50.0;
        }
        assert_eq!(non_collision_score(&rest, &giant), 0.0);
        let mut near = vec![0.0; PARAM_DIM];
        near[0] = 0.15;
        let h = forward_kinematics(&tree, &near).unwrap();
        let mut outside = 0;
        for v in &h.vertices {
            let inside = rest.capsules.iter().any(|c| crate::body::sdf::segment_distance(*v, c.a, c.b) <= c.radius);
            outside += usize::from(!inside);
        }
        let score = non_collision_score(&h, &rest);
        assert_eq!(score, 100.0 * outside as f64 / h.vertices.len() as f64);
        assert!(score > 0.0 && score < 100.0);
    }
}
