//! Forward kinematics, once on plain arrays and once on the autodiff tape.

use std::sync::Arc;

use super::skeleton::{KinematicTree, RegionPartition};
use super::{check_params, joint_param_offset, BodyError, PARAM_DIM};
use crate::autodiff::{concat, Tensor, Var};
use crate::geometry::{add, axis_angle_to_matrix, mat_mul, mat_vec, matrix_to_axis_angle, scale, Mat3, Vec3};

/// World-space capsule: segment `a`–`b` inflated by `radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct PosedBody {
    /// Per-joint world rotation.
    pub rotations: Vec<Mat3>,
    /// Per-joint world position.
    pub positions: Vec<Vec3>,
    /// Surface samples, region-major.
    pub vertices: Vec<Vec3>,
    pub capsules: Vec<Capsule>,
    pub region_centers: Vec<Vec3>,
    partition: Arc<RegionPartition>,
}

impl PosedBody {
    pub fn partition(&self) -> &Arc<RegionPartition> {
        &self.partition
    }

    pub fn num_regions(&self) -> usize {
        self.partition.num_regions()
    }

    pub fn region_ids(&self) -> &[usize] {
        &self.partition.region_of_vertex
    }

    pub fn region_vertices(&self, region: usize) -> Result<&[Vec3], BodyError> {
        let range = self
            .partition
            .ranges
            .get(region)
            .ok_or(BodyError::InvalidRegion { region, count: self.num_regions() })?;
        Ok(&self.vertices[range.clone()])
    }

    pub fn pelvis(&self) -> Vec3 {
        self.positions[0]
    }
}

/// Constant tensors reused by every tape FK call.
#[derive(Clone, Debug)]
pub(crate) struct TapeConsts {
    /// Maps an axis-angle row `[1,3]` to the flattened skew matrix `[1,9]`.
    skew_map: Arc<Tensor>,
    eye: Arc<Tensor>,
    /// Rest offsets as rows `[1,3]`.
    offsets: Vec<Arc<Tensor>>,
    /// Per-capsule joint-local surface samples `[n,3]`.
    local_points: Vec<Arc<Tensor>>,
}

impl TapeConsts {
    pub(crate) fn build(offsets: &[Vec3], local_points: &[Vec<Vec3>]) -> Self {
        let mut skew = vec![0.0; 27];
        // row = axis-angle component, column = flattened (row, col) of K
        for (w, idx, sign) in [(0, 5, -1.0), (0, 7, 1.0), (1, 2, 1.0), (1, 6, -1.0), (2, 1, -1.0), (2, 3, 1.0)] {
            skew[w * 9 + idx] = sign;
        }
        let rows = |pts: &[Vec3]| {
            Arc::new(Tensor::new(&[pts.len(), 3], pts.iter().flatten().copied().collect()).expect("n×3 rows"))
        };
        Self {
            skew_map: Arc::new(Tensor::new(&[3, 9], skew).expect("3×9")),
            eye: Arc::new(Tensor::eye(3)),
            offsets: offsets.iter().map(|o| rows(std::slice::from_ref(o))).collect(),
            local_points: local_points.iter().map(|p| rows(p)).collect(),
        }
    }
}

pub fn forward_kinematics(tree: &KinematicTree, x: &[f64]) -> Result<PosedBody, BodyError> {
    check_params(x)?;
    let n = tree.joints.len();
    let mut rotations: Vec<Mat3> = Vec::with_capacity(n);
    let mut positions: Vec<Vec3> = Vec::with_capacity(n);
    for (j, joint) in tree.joints.iter().enumerate() {
        let o = joint_param_offset(j);
        let local = axis_angle_to_matrix([x[o], x[o + 1], x[o + 2]]);
        match joint.parent {
            None => {
                rotations.push(local);
                positions.push(add([x[0], x[1], x[2]], joint.offset));
            }
            Some(p) => {
                let (rp, pp) = (rotations[p], positions[p]);
                rotations.push(mat_mul(&rp, &local));
                positions.push(add(pp, mat_vec(&rp, joint.offset)));
            }
        }
    }
    let mut vertices = Vec::with_capacity(tree.num_vertices());
    let mut capsules = Vec::with_capacity(tree.capsules.len());
    for (cap, pts) in tree.capsules.iter().zip(&tree.local_points) {
        let (r, p) = (&rotations[cap.joint], positions[cap.joint]);
        vertices.extend(pts.iter().map(|&q| add(p, mat_vec(r, q))));
        capsules.push(Capsule { a: p, b: add(p, mat_vec(r, cap.end)), radius: cap.radius });
    }
    let partition = Arc::clone(&tree.partition);
    let region_centers = partition
        .ranges
        .iter()
        .map(|range| {
            let sum = vertices[range.clone()].iter().fold([0.0; 3], |acc, &v| add(acc, v));
            scale(sum, 1.0 / range.len() as f64)
        })
        .collect();
    Ok(PosedBody { rotations, positions, vertices, capsules, region_centers, partition })
}

/// Surface vertices `[V,3]` (region-major, same order as
/// [`PosedBody::vertices`]) as a differentiable function of the parameter
/// vector `x` of shape `[54]`.
pub fn vertices_on_tape<'t>(tree: &KinematicTree, x: Var<'t>) -> Result<Var<'t>, BodyError> {
    if x.shape() != [PARAM_DIM] {
        return Err(BodyError::ParamLength(x.value().numel()));
    }
    let tape = x.tape();
    let c = &tree.tape_consts;
    let skew_map = tape.constant_shared(Arc::clone(&c.skew_map));
    let eye = tape.constant_shared(Arc::clone(&c.eye));
    // Rotations are kept transposed so points can stay row vectors.
    let mut rot_t: Vec<Var<'t>> = Vec::with_capacity(tree.joints.len());
    let mut pos: Vec<Var<'t>> = Vec::with_capacity(tree.joints.len());
    for (j, joint) in tree.joints.iter().enumerate() {
        let o = joint_param_offset(j);
        let w = x.slice(0, o, o + 3)?;
        let s = w.square().sum();
        let k = w.reshape(&[1, 3])?.matmul(skew_map)?.reshape(&[3, 3])?;
        let k2 = k.matmul(k)?;
        // Kᵀ = −K and (K²)ᵀ = K²
        let local_t = eye.sub(k.mul(s.rodrigues_a())?)?.add(k2.mul(s.rodrigues_b())?)?;
        let offset = tape.constant_shared(Arc::clone(&c.offsets[j]));
        match joint.parent {
            None => {
                rot_t.push(local_t);
                pos.push(x.slice(0, 0, 3)?.add(offset.reshape(&[3])?)?);
            }
            Some(p) => {
                rot_t.push(local_t.matmul(rot_t[p])?);
                let moved = offset.matmul(rot_t[p])?.reshape(&[3])?;
                pos.push(pos[p].add(moved)?);
            }
        }
    }
    let blocks = tree
        .capsules
        .iter()
        .zip(&c.local_points)
        .map(|(cap, pts)| {
            let local = tape.constant_shared(Arc::clone(pts));
            local.matmul(rot_t[cap.joint])?.add(pos[cap.joint])
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(concat(&blocks, 0)?)
}

impl KinematicTree {
    /// Parameters of the body after the world rigid motion `p ↦ r·p + t`:
    /// the root rotation is pre-multiplied by `r` and the root moves with it.
    pub fn transform_params(&self, x: &[f64], r: &Mat3, t: Vec3) -> Result<Vec<f64>, BodyError> {
        check_params(x)?;
        let o = self.joints[0].offset;
        let root = add([x[0], x[1], x[2]], o);
        let moved = add(mat_vec(r, root), t);
        let rot = mat_mul(r, &axis_angle_to_matrix([x[3], x[4], x[5]]));
        let w = matrix_to_axis_angle(&rot);
        let mut out = x.to_vec();
        for k in 0..3 {
            out[k] = moved[k] - o[k];
            out[3 + k] = w[k];
        }
        Ok(out)
    }

    /// Rest pose at the origin.
    pub fn rest_pose(&self) -> PosedBody {
        forward_kinematics(self, &[0.0; PARAM_DIM]).expect("zero parameters are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::body::NUM_JOINTS;
    use crate::geometry::dist;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, bound: f64) -> Vec<f64> {
        (0..PARAM_DIM)
            .map(|i| if i < 3 { rng.random_range(-1.0..1.0) } else { rng.random_range(-bound..bound) })
            .collect()
    }

    #[test]
    fn rest_pose_positions_are_cumulative_offsets() {
        let tree = KinematicTree::toy();
        let body = tree.rest_pose();
        for j in 0..NUM_JOINTS {
            let mut want = [0.0; 3];
            let mut k = Some(j);
            while let Some(i) = k {
                want = add(want, tree.joints()[i].offset);
                k = tree.joints()[i].parent;
            }
            assert!(dist(body.positions[j], want) < 1e-15, "joint {j}");
        }
        // left wrist at the tip of the left arm chain
        assert!(dist(body.positions[7], [0.71, 0.53, 0.0]) < 1e-12);
    }

    #[test]
    fn translation_moves_every_vertex() {
        let tree = KinematicTree::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_params(&mut rng, 1.0);
        let mut y = x.clone();
        let t = [0.3, -1.2, 2.5];
        for i in 0..3 {
            y[i] += t[i];
        }
        let (a, b) = (forward_kinematics(&tree, &x).unwrap(), forward_kinematics(&tree, &y).unwrap());
        for (va, vb) in a.vertices.iter().zip(&b.vertices) {
            assert!(dist(add(*va, t), *vb) < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_root_maps_x_offsets_to_y() {
        let tree = KinematicTree::toy();
        let mut x = [0.0; PARAM_DIM];
        x[5] = std::f64::consts::FRAC_PI_2;
        let body = forward_kinematics(&tree, &x).unwrap();
        // the hip offset (0.10, −0.05, 0) rotates to (0.05, 0.10, 0)
        assert!(dist(body.positions[11], [0.05, 0.10, 0.0]) < 1e-10);
    }

    #[test]
    fn region_centers_are_means() {
        let tree = KinematicTree::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let body = forward_kinematics(&tree, &random_params(&mut rng, 1.5)).unwrap();
        for r in 0..body.num_regions() {
            let pts = body.region_vertices(r).unwrap();
            let mut m = [0.0; 3];
            for p in pts {
                for k in 0..3 {
                    m[k] += p[k] / pts.len() as f64;
                }
            }
            assert!(dist(m, body.region_centers[r]) < 1e-12);
        }
        assert!(body.region_vertices(16).is_err());
    }

    #[test]
    fn tape_fk_matches_plain_fk() {
        let tree = KinematicTree::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x = random_params(&mut rng, std::f64::consts::FRAC_PI_2);
            let plain = forward_kinematics(&tree, &x).unwrap();
            let tape = Tape::new();
            let v = vertices_on_tape(&tree, tape.leaf(Tensor::vector(&x))).unwrap();
            let val = v.value();
            assert_eq!(val.shape(), &[plain.vertices.len(), 3]);
            for (i, p) in plain.vertices.iter().enumerate() {
                assert!(dist(*p, [val.data()[3 * i], val.data()[3 * i + 1], val.data()[3 * i + 2]]) < 1e-12);
            }
        }
    }

    /// ∑ wᵢ·vᵢ against central differences for every parameter coordinate.
    #[test]
    fn tape_fk_gradient_matches_finite_differences() {
        let tree = KinematicTree::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let weights: Vec<f64> = (0..tree.num_vertices() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |x: &[f64]| -> f64 {
            let body = forward_kinematics(&tree, x).unwrap();
            body.vertices.iter().flatten().zip(&weights).map(|(v, w)| v * w).sum()
        };
        for trial in 0..3 {
            let mut x = random_params(&mut rng, std::f64::consts::FRAC_PI_2);
            if trial == 2 {
                // exercise the small-angle series branch
                for v in &mut x[3..] {
                    *v *= 1e-3;
                }
            }
            let tape = Tape::new();
            let xv = tape.leaf(Tensor::vector(&x));
            let v = vertices_on_tape(&tree, xv).unwrap();
            let loss = v.mul(tape.constant(Tensor::new(&[tree.num_vertices(), 3], weights.clone()).unwrap())).unwrap().sum();
            let grads = tape.backward(loss).unwrap();
            let g = grads.get(xv).unwrap();
            let h = 1e-5;
            for i in 0..PARAM_DIM {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
                let a = g.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "coordinate {i}: analytic {a} vs numeric {fd}");
            }
        }
    }

    #[test]
    fn transform_params_moves_the_surface_rigidly() {
        let tree = KinematicTree::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_params(&mut rng, 1.0);
        let r = axis_angle_to_matrix([0.3, -1.1, 0.7]);
        let t = [0.4, -0.2, 1.5];
        let moved = forward_kinematics(&tree, &tree.transform_params(&x, &r, t).unwrap()).unwrap();
        let body = forward_kinematics(&tree, &x).unwrap();
        for (a, b) in body.vertices.iter().zip(&moved.vertices) {
            assert!(dist(add(mat_vec(&r, *a), t), *b) < 1e-9);
        }
    }

    #[test]
    fn mirrored_parameters_mirror_the_surface() {
        let tree = KinematicTree::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_params(&mut rng, 1.2);
        let a = forward_kinematics(&tree, &x).unwrap();
        let b = forward_kinematics(&tree, &crate::body::mirror_params(&x)).unwrap();
        let p = tree.partition();
        for (i, va) in a.vertices.iter().enumerate() {
            let m = p.vertex_mirror[i];
            assert_eq!(p.mirror[p.region_of_vertex[i]], p.region_of_vertex[m]);
            assert!(dist([-va[0], va[1], va[2]], b.vertices[m]) < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn layout_is_pose_independent(seed in 0u64..1000) {
            let tree = KinematicTree::toy();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let body = forward_kinematics(&tree, &random_params(&mut rng, 3.0)).unwrap();
            prop_assert_eq!(body.vertices.len(), tree.num_vertices());
            prop_assert_eq!(body.region_ids(), &tree.partition().region_of_vertex[..]);
            prop_assert!(body.vertices.iter().flatten().all(|v| v.is_finite()));
        }
    }
}
