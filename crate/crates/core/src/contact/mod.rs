//! Region-pair contact maps: geometric ground truth, a learned predictor over
//! region centers, thresholding into the contact region set, and the binary
//! cross-entropy objective.

mod predictor;
mod train;

pub use predictor::{ContactConfig, ContactInput, ContactPredictor};
pub use train::{train_contact_predictor, ContactExample, ContactTrainConfig, ContactTrainReport};

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::body::{BodyError, PosedBody};
use crate::geometry::{dist, sub, Vec3};

/// Clamp applied to probabilities inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum ContactError {
    #[error("region count mismatch: {0} vs {1}")]
    RegionCount(usize, usize),
    #[error("contact map shape mismatch: {0} vs {1} entries")]
    Shape(usize, usize),
    #[error("threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("invalid contact configuration: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Body(#[from] BodyError),
}

/// Square map over region pairs: row = interactive body, column = partner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactMap {
    pub regions: usize,
    /// Row-major `regions × regions` values in `[0, 1]`.
    pub values: Vec<f64>,
}

impl ContactMap {
    pub fn new(regions: usize, values: Vec<f64>) -> Result<Self, ContactError> {
        if values.len() != regions * regions {
            return Err(ContactError::Shape(regions * regions, values.len()));
        }
        Ok(Self { regions, values })
    }

    pub fn zeros(regions: usize) -> Self {
        Self { regions, values: vec![0.0; regions * regions] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.regions + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.regions + j] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    /// The map after swapping left and right regions on both axes.
    pub fn mirrored(&self, region_mirror: &[usize]) -> Self {
        let mut out = Self::zeros(self.regions);
        for i in 0..self.regions {
            for j in 0..self.regions {
                out.set(region_mirror[i], region_mirror[j], self.get(i, j));
            }
        }
        out
    }
}

/// Region pairs `(i, j)` with `C[i][j] ≥ τ`, in row-major order.
pub fn threshold_contacts(map: &ContactMap, tau: f64) -> Result<Vec<(usize, usize)>, ContactError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ContactError::Threshold(tau));
    }
    let n = map.regions;
    Ok((0..n * n).filter(|&k| map.values[k] >= tau).map(|k| (k / n, k % n)).collect())
}

/// Center and enclosing radius of every region's vertices.
fn region_bounds(body: &PosedBody) -> Vec<(Vec3, f64)> {
    let part = body.partition();
    part.ranges
        .iter()
        .zip(&body.region_centers)
        .map(|(r, &c)| (c, body.vertices[r.clone()].iter().map(|&v| dist(v, c)).fold(0.0, f64::max)))
        .collect()
}

/// `C[i][j] = 1` when some vertex of region `i` of `h` lies closer than `delta`
/// to some vertex of region `j` of `p`. Pairs whose bounding spheres are
/// further apart than `delta` are skipped without changing the result.
pub fn ground_truth_contacts(h: &PosedBody, p: &PosedBody, delta: f64) -> Result<ContactMap, ContactError> {
    let (nh, np) = (h.num_regions(), p.num_regions());
    if nh != np {
        return Err(ContactError::RegionCount(nh, np));
    }
    let (bh, bp) = (region_bounds(h), region_bounds(p));
    let d2 = delta * delta;
    let mut map = ContactMap::zeros(nh);
    for i in 0..nh {
        let vi = h.region_vertices(i)?;
        for j in 0..np {
            let gap = dist(bh[i].0, bp[j].0) - bh[i].1 - bp[j].1;
            if gap >= delta {
                continue;
            }
            let vj = p.region_vertices(j)?;
            let hit = vi.iter().any(|a| {
                vj.iter().any(|b| {
                    let d = sub(*a, *b);
                    d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < d2
                })
            });
            if hit {
                map.set(i, j, 1.0);
            }
        }
    }
    Ok(map)
}

/// Mean binary cross-entropy with predictions clamped to
/// `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub fn bce_loss(pred: &ContactMap, target: &ContactMap) -> Result<f64, ContactError> {
    if pred.values.len() != target.values.len() {
        return Err(ContactError::Shape(pred.values.len(), target.values.len()));
    }
    let n = pred.values.len() as f64;
    let total: f64 = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(&q, &c)| {
            let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(c * q.ln() + (1.0 - c) * (1.0 - q).ln())
        })
        .sum();
    Ok(total / n)
}

/// Pair-level detection counts and the derived precision, recall and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl DetectionScore {
    pub fn add(&mut self, pred: &[(usize, usize)], truth: &ContactMap) {
        let hits = pred.iter().filter(|&&(i, j)| truth.get(i, j) >= 0.5).count();
        self.true_pos += hits;
        self.false_pos += pred.len() - hits;
        self.false_neg += truth.values.iter().filter(|&&v| v >= 0.5).count() - hits;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.true_pos, 2 * self.true_pos + self.false_pos + self.false_neg)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::sdf::region_min_distance;
    use crate::body::{forward_kinematics, KinematicTree, PARAM_DIM};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, n: usize) -> ContactMap {
        ContactMap::new(n, (0..n * n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn threshold_cases() {
        let mut m = ContactMap::zeros(4);
        assert!(threshold_contacts(&m, 0.5).unwrap().is_empty());
        m.set(2, 1, 0.7);
        assert_eq!(threshold_contacts(&m, 0.5).unwrap(), vec![(2, 1)]);
        m.set(0, 3, 0.5);
        assert_eq!(threshold_contacts(&m, 0.5).unwrap(), vec![(0, 3), (2, 1)]);
        assert!(threshold_contacts(&m, 0.0).is_err());
        assert!(threshold_contacts(&m, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn threshold_matches_definition_and_is_monotone(seed in any::<u64>(), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_map(&mut rng, 6);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = threshold_contacts(&m, lo).unwrap();
            let b = threshold_contacts(&m, hi).unwrap();
            prop_assert!(b.len() <= a.len());
            let mut want = Vec::new();
            for i in 0..6 {
                for j in 0..6 {
                    if m.get(i, j) >= lo {
                        want.push((i, j));
                    }
                }
            }
            prop_assert_eq!(a, want);
        }

        #[test]
        fn bce_is_non_negative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_map(&mut rng, 5);
            let t = ContactMap::new(5, (0..25).map(|_| f64::from(rng.random::<bool>())).collect()).unwrap();
            prop_assert!(bce_loss(&p, &t).unwrap() >= 0.0);
        }
    }

    #[test]
    fn bce_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = ContactMap::new(4, (0..16).map(|i| f64::from(i % 3 == 0)).collect()).unwrap();
        assert!(bce_loss(&t, &t).unwrap() < 1e-6);
        let half = ContactMap::new(4, vec![0.5; 16]).unwrap();
        assert!((bce_loss(&half, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let p = random_map(&mut rng, 4);
        let mut total = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let (q, c) = (p.get(i, j), t.get(i, j));
                total -= c * q.ln() + (1.0 - c) * (1.0 - q).ln();
            }
        }
        assert!((bce_loss(&p, &t).unwrap() - total / 16.0).abs() < 1e-12);
        assert!(bce_loss(&p, &ContactMap::zeros(3)).is_err());
    }

    fn posed(x: &[f64]) -> PosedBody {
        forward_kinematics(&KinematicTree::toy(), x).unwrap()
    }

    #[test]
    fn ground_truth_far_and_coincident() {
        let mut x = vec![0.0; PARAM_DIM];
        let a = posed(&x);
        x[0] = 10.0;
        let far = posed(&x);
        assert_eq!(ground_truth_contacts(&a, &far, 0.02).unwrap().count_nonzero(), 0);
        let same = ground_truth_contacts(&a, &a, 0.02).unwrap();
        for i in 0..a.num_regions() {
            assert_eq!(same.get(i, i), 1.0);
        }
    }

    #[test]
    fn ground_truth_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..4 {
            let xh: Vec<f64> = (0..PARAM_DIM).map(|_| rng.random_range(-0.6..0.6)).collect();
            let mut xp: Vec<f64> = (0..PARAM_DIM).map(|_| rng.random_range(-0.6..0.6)).collect();
            for k in 0..3 {
                xp[k] = xh[k] + 0.3 * xp[k];
            }
            let (h, p) = (posed(&xh), posed(&xp));
            let map = ground_truth_contacts(&h, &p, 0.05).unwrap();
            let mut positives = 0;
            for i in 0..h.num_regions() {
                for j in 0..p.num_regions() {
                    let want = region_min_distance(&h, i, &p, j).unwrap() < 0.05;
                    assert_eq!(map.get(i, j) == 1.0, want, "pair {i},{j}");
                    positives += usize::from(want);
                }
            }
            assert!(positives > 0);
        }
    }

    #[test]
    fn detection_score_counts() {
        let mut truth = ContactMap::zeros(3);
        truth.set(0, 0, 1.0);
        truth.set(1, 2, 1.0);
        let mut s = DetectionScore::default();
        s.add(&[(0, 0), (2, 2)], &truth);
        assert_eq!((s.true_pos, s.false_pos, s.false_neg), (1, 1, 1));
        assert!((s.f1() - 0.5).abs() < 1e-15);
        assert_eq!(DetectionScore::default().f1(), 1.0);
    }

    #[test]
    fn mirrored_map_moves_pairs() {
        let mut m = ContactMap::zeros(3);
        m.set(0, 1, 1.0);
        let mm = m.mirrored(&[1, 0, 2]);
        assert_eq!(mm.get(1, 0), 1.0);
        assert_eq!(mm.mirrored(&[1, 0, 2]), m);
    }
}
