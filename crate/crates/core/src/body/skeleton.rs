//! Capsule skeleton: a 17-joint kinematic tree whose non-root joints each own
//! one capsule.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fk::TapeConsts;
use super::BodyError;
use crate::geometry::{cross, norm, normalize, scale, Vec3};

pub const NUM_JOINTS: usize = 17;

/// Joint names in tree order; index = joint id.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis", "spine", "chest", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
    "r_elbow", "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
];

/// Left/right joint pairs swapped by a sagittal mirror.
pub const MIRROR_JOINT_PAIRS: [(usize, usize); 6] = [(5, 8), (6, 9), (7, 10), (11, 14), (12, 15), (13, 16)];

pub fn mirror_joint(j: usize) -> usize {
    for &(l, r) in &MIRROR_JOINT_PAIRS {
        if j == l {
            return r;
        }
        if j == r {
            return l;
        }
    }
    j
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    /// `None` for the root.
    pub parent: Option<usize>,
    /// Rest offset from the parent, in the parent frame (meters).
    pub offset: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleSpec {
    pub name: String,
    /// Joint whose frame carries the capsule; the segment starts at it.
    pub joint: usize,
    /// Segment end in the joint frame.
    pub end: Vec3,
    pub radius: f64,
}

/// Serializable skeleton description (the `body.skeleton` config section).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonSpec {
    pub joints: Vec<JointSpec>,
    pub capsules: Vec<CapsuleSpec>,
}

impl Default for SkeletonSpec {
    /// T-pose, facing +z, y up, the body's left on +x.
    fn default() -> Self {
        let j = |name: &str, parent: Option<usize>, offset: Vec3| JointSpec {
            name: name.to_string(),
            parent,
            offset,
        };
        let joints = vec![
            j("pelvis", None, [0.0, 0.0, 0.0]),
            j("spine", Some(0), [0.0, 0.10, 0.0]),
            j("chest", Some(1), [0.0, 0.25, 0.0]),
            j("neck", Some(2), [0.0, 0.22, 0.0]),
            j("head", Some(3), [0.0, 0.10, 0.0]),
            j("l_shoulder", Some(2), [0.18, 0.18, 0.0]),
            j("l_elbow", Some(5), [0.28, 0.0, 0.0]),
            j("l_wrist", Some(6), [0.25, 0.0, 0.0]),
            j("r_shoulder", Some(2), [-0.18, 0.18, 0.0]),
            j("r_elbow", Some(8), [-0.28, 0.0, 0.0]),
            j("r_wrist", Some(9), [-0.25, 0.0, 0.0]),
            j("l_hip", Some(0), [0.10, -0.05, 0.0]),
            j("l_knee", Some(11), [0.0, -0.42, 0.0]),
            j("l_ankle", Some(12), [0.0, -0.40, 0.0]),
            j("r_hip", Some(0), [-0.10, -0.05, 0.0]),
            j("r_knee", Some(14), [0.0, -0.42, 0.0]),
            j("r_ankle", Some(15), [0.0, -0.40, 0.0]),
        ];
        let c = |name: &str, joint: usize, end: Vec3, radius: f64| CapsuleSpec {
            name: name.to_string(),
            joint,
            end,
            radius,
        };
        let capsules = vec![
            c("spine", 1, [0.0, 0.25, 0.0], 0.12),
            c("chest", 2, [0.0, 0.22, 0.0], 0.13),
            c("neck", 3, [0.0, 0.10, 0.0], 0.05),
            c("head", 4, [0.0, 0.16, 0.0], 0.10),
            c("l_upper_arm", 5, [0.28, 0.0, 0.0], 0.05),
            c("l_forearm", 6, [0.25, 0.0, 0.0], 0.04),
            c("l_hand", 7, [0.14, 0.0, 0.0], 0.035),
            c("r_upper_arm", 8, [-0.28, 0.0, 0.0], 0.05),
            c("r_forearm", 9, [-0.25, 0.0, 0.0], 0.04),
            c("r_hand", 10, [-0.14, 0.0, 0.0], 0.035),
            c("l_thigh", 11, [0.0, -0.42, 0.0], 0.07),
            c("l_shin", 12, [0.0, -0.40, 0.0], 0.05),
            c("l_foot", 13, [0.0, -0.05, 0.15], 0.04),
            c("r_thigh", 14, [0.0, -0.42, 0.0], 0.07),
            c("r_shin", 15, [0.0, -0.40, 0.0], 0.05),
            c("r_foot", 16, [0.0, -0.05, 0.15], 0.04),
        ];
        Self { joints, capsules }
    }
}

/// Surface sampling and region layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Vertices per capsule: two poles plus rings of six.
    pub samples_per_capsule: usize,
    /// Regions per capsule, split along the capsule axis. `N_reg` is
    /// `capsules × regions_per_capsule`.
    pub regions_per_capsule: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { samples_per_capsule: 32, regions_per_capsule: 1 }
    }
}

const RING_POINTS: usize = 6;

/// Validated skeleton with precomputed joint-local surface samples.
#[derive(Clone, Debug)]
pub struct KinematicTree {
    pub(crate) joints: Vec<JointSpec>,
    pub(crate) capsules: Vec<CapsuleSpec>,
    /// Surface samples per capsule in the owning joint's frame, ordered by
    /// region.
    pub(crate) local_points: Vec<Vec<Vec3>>,
    pub(crate) partition: Arc<RegionPartition>,
    pub(crate) tape_consts: Arc<TapeConsts>,
    sampling: SamplingConfig,
}

/// Fixed assignment of surface vertices to regions. Vertices are stored
/// region-major, so every region is a contiguous index range.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    pub region_of_vertex: Vec<usize>,
    pub ranges: Vec<Range<usize>>,
    pub names: Vec<String>,
    /// Region index under the sagittal mirror.
    pub mirror: Vec<usize>,
    /// Vertex index under the sagittal mirror.
    pub vertex_mirror: Vec<usize>,
}

impl RegionPartition {
    pub fn num_regions(&self) -> usize {
        self.ranges.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.region_of_vertex.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl KinematicTree {
    pub fn new(spec: &SkeletonSpec, sampling: SamplingConfig) -> Result<Self, BodyError> {
        let invalid = |m: String| Err(BodyError::InvalidSkeleton(m));
        if spec.joints.len() != NUM_JOINTS {
            return invalid(format!("expected {NUM_JOINTS} joints, got {}", spec.joints.len()));
        }
        for (i, j) in spec.joints.iter().enumerate() {
            match j.parent {
                None if i != 0 => return invalid(format!("joint {i} has no parent; only joint 0 may be the root")),
                Some(_) if i == 0 => return invalid("joint 0 must be the root".into()),
                Some(p) if p >= i => return invalid(format!("joint {i} has parent {p}, not topological")),
                _ => {}
            }
        }
        if spec.capsules.len() != NUM_JOINTS - 1 {
            return invalid(format!("expected {} capsules, got {}", NUM_JOINTS - 1, spec.capsules.len()));
        }
        for (i, c) in spec.capsules.iter().enumerate() {
            if c.joint != i + 1 {
                return invalid(format!("capsule {i} must belong to joint {}", i + 1));
            }
            if !(c.radius > 0.0) || norm(c.end) <= 0.0 {
                return invalid(format!("capsule {} needs positive radius and length", c.name));
            }
        }
        let n = sampling.samples_per_capsule;
        if n < 2 + RING_POINTS || !(n - 2).is_multiple_of(RING_POINTS) {
            return invalid(format!("samples_per_capsule must be 2 + 6k (k >= 1), got {n}"));
        }
        let k = sampling.regions_per_capsule;
        if k == 0 || k > n {
            return invalid(format!("regions_per_capsule must be in 1..={n}, got {k}"));
        }
        check_mirror_symmetry(spec)?;

        let mut local_points = vec![Vec::new(); spec.capsules.len()];
        let mut sub_regions = vec![Vec::new(); spec.capsules.len()];
        for (ci, cap) in spec.capsules.iter().enumerate() {
            let mirrored = mirror_joint(cap.joint) - 1;
            if mirrored < ci {
                // Right-side capsule: reflect the left-side pattern.
                local_points[ci] = local_points[mirrored].iter().map(|p: &Vec3| [-p[0], p[1], p[2]]).collect();
                sub_regions[ci] = sub_regions[mirrored].clone();
            } else {
                let (pts, subs) = sample_capsule(cap, n, k);
                local_points[ci] = pts;
                sub_regions[ci] = subs;
            }
        }

        let mut region_of_vertex = Vec::new();
        let mut ranges = Vec::new();
        let mut names = Vec::new();
        let mut ordered = Vec::with_capacity(local_points.len());
        for (ci, cap) in spec.capsules.iter().enumerate() {
            let mut pts = Vec::with_capacity(n);
            for sub in 0..k {
                let start = region_of_vertex.len();
                for (p, &s) in local_points[ci].iter().zip(&sub_regions[ci]) {
                    if s == sub {
                        pts.push(*p);
                        region_of_vertex.push(ci * k + sub);
                    }
                }
                if region_of_vertex.len() == start {
                    return invalid(format!("region {sub} of capsule {} received no vertices", cap.name));
                }
                ranges.push(start..region_of_vertex.len());
                names.push(if k == 1 { cap.name.clone() } else { format!("{}.{sub}", cap.name) });
            }
            ordered.push(pts);
        }
        let mirror = (0..ranges.len())
            .map(|r| (mirror_joint(r / k + 1) - 1) * k + r % k)
            .collect();
        let vertex_mirror = mirror_vertices(&ordered, n);
        let offsets: Vec<Vec3> = spec.joints.iter().map(|j| j.offset).collect();
        Ok(Self {
            tape_consts: Arc::new(TapeConsts::build(&offsets, &ordered)),
            joints: spec.joints.clone(),
            capsules: spec.capsules.clone(),
            local_points: ordered,
            partition: Arc::new(RegionPartition { region_of_vertex, ranges, names, mirror, vertex_mirror }),
            sampling,
        })
    }

    /// The built-in toy skeleton with default sampling.
    pub fn toy() -> Self {
        Self::new(&SkeletonSpec::default(), SamplingConfig::default()).expect("default skeleton is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_capsules(&self) -> usize {
        self.capsules.len()
    }

    pub fn num_regions(&self) -> usize {
        self.partition.num_regions()
    }

    pub fn num_vertices(&self) -> usize {
        self.partition.num_vertices()
    }

    pub fn partition(&self) -> &Arc<RegionPartition> {
        &self.partition
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn capsules(&self) -> &[CapsuleSpec] {
        &self.capsules
    }

    pub fn sampling(&self) -> SamplingConfig {
        self.sampling
    }

    pub fn spec(&self) -> SkeletonSpec {
        SkeletonSpec { joints: self.joints.clone(), capsules: self.capsules.clone() }
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.partition.index_of(name)
    }
}

/// For each vertex, the index of its reflection; patterns are exact mirrors,
/// so nearest-point matching is unambiguous.
fn mirror_vertices(points: &[Vec<Vec3>], per_capsule: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(points.len() * per_capsule);
    for (ci, pts) in points.iter().enumerate() {
        let mc = mirror_joint(ci + 1) - 1;
        for p in pts {
            let m = [-p[0], p[1], p[2]];
            let (best, _) = points[mc]
                .iter()
                .map(|q| crate::geometry::dist(*q, m))
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc });
            out.push(mc * per_capsule + best);
        }
    }
    out
}

fn check_mirror_symmetry(spec: &SkeletonSpec) -> Result<(), BodyError> {
    let reflect = |v: Vec3| [-v[0], v[1], v[2]];
    for j in 0..NUM_JOINTS {
        let m = mirror_joint(j);
        let (a, b) = (&spec.joints[j], &spec.joints[m]);
        if reflect(a.offset) != b.offset || a.parent.map(mirror_joint) != b.parent {
            return Err(BodyError::InvalidSkeleton(format!(
                "joints {} and {} are not mirror images",
                a.name, b.name
            )));
        }
        if j > 0 {
            let (ca, cb) = (&spec.capsules[j - 1], &spec.capsules[m - 1]);
            if reflect(ca.end) != cb.end || ca.radius != cb.radius {
                return Err(BodyError::InvalidSkeleton(format!(
                    "capsules {} and {} are not mirror images",
                    ca.name, cb.name
                )));
            }
            if m == j && ca.end[0] != 0.0 {
                return Err(BodyError::InvalidSkeleton(format!(
                    "central capsule {} must lie in the x = 0 plane",
                    ca.name
                )));
            }
        }
    }
    Ok(())
}

/// Two poles plus rings of six around a capsule from the joint origin to
/// `cap.end`. Ring `k` is rotated by `π/2 + kπ/6`, giving a twisted spiral
/// that maps onto itself under x → −x when the axis lies in the x = 0 plane.
/// Returns the points and their sub-region along the axis.
fn sample_capsule(cap: &CapsuleSpec, n: usize, regions: usize) -> (Vec<Vec3>, Vec<usize>) {
    let len = norm(cap.end);
    let r = cap.radius;
    let axis = scale(cap.end, 1.0 / len);
    let u = if axis[0] == 0.0 {
        [1.0, 0.0, 0.0]
    } else {
        let helper = if axis[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        normalize(cross(axis, helper))
    };
    let v = cross(axis, u);
    let rings = (n - 2) / RING_POINTS;
    let quarter = 0.5 * std::f64::consts::PI * r;
    let profile_len = 2.0 * quarter + len;

    // (axial position, radial distance)
    let mut profile = vec![(-r, 0.0)];
    for k in 1..=rings {
        let s = profile_len * k as f64 / (rings + 1) as f64;
        profile.push(if s < quarter {
            let a = s / r;
            (-r * a.cos(), r * a.sin())
        } else if s <= quarter + len {
            (s - quarter, r)
        } else {
            let a = (s - quarter - len) / r;
            (len + r * a.sin(), r * a.cos())
        });
    }
    profile.push((len + r, 0.0));

    let mut pts = Vec::with_capacity(n);
    let mut subs = Vec::with_capacity(n);
    let sub_of = |z: f64| (((z + r) / (len + 2.0 * r) * regions as f64) as usize).min(regions - 1);
    let point = |z: f64, rho: f64, phi: f64| -> Vec3 {
        let (s, c) = phi.sin_cos();
        [
            axis[0] * z + rho * (c * u[0] + s * v[0]),
            axis[1] * z + rho * (c * u[1] + s * v[1]),
            axis[2] * z + rho * (c * u[2] + s * v[2]),
        ]
    };
    for (k, &(z, rho)) in profile.iter().enumerate() {
        if rho == 0.0 {
            pts.push(scale(axis, z));
            subs.push(sub_of(z));
            continue;
        }
        let step = 2.0 * std::f64::consts::PI / RING_POINTS as f64;
        let phase = 0.5 * std::f64::consts::PI + k as f64 * step / 2.0;
        for i in 0..RING_POINTS {
            pts.push(point(z, rho, phase + i as f64 * step));
            subs.push(sub_of(z));
        }
    }
    (pts, subs)
}
