//! Capsule-skeleton body model: parameter layout, forward kinematics, surface
//! samples, region partition and signed distance.

mod export;
mod fk;
pub mod sdf;
mod skeleton;

use std::ops::Range;

pub use export::{body_json, write_obj};
pub use fk::{forward_kinematics, vertices_on_tape, Capsule, PosedBody};
pub use sdf::capsule_sdf;
pub use skeleton::{
    mirror_joint, CapsuleSpec, JointSpec, KinematicTree, RegionPartition, SamplingConfig, SkeletonSpec,
    JOINT_NAMES, MIRROR_JOINT_PAIRS, NUM_JOINTS,
};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum BodyError {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("region {region} out of range (body has {count})")]
    InvalidRegion { region: usize, count: usize },
    #[error("body parameters must have length {PARAM_DIM}, got {0}")]
    ParamLength(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Length of a body parameter vector.
pub const PARAM_DIM: usize = 54;

/// Translation, root rotation, body pose, wrist pose.
pub const SEGMENTS: [Range<usize>; 4] = [0..3, 3..6, 6..48, 48..54];
pub const SEGMENT_NAMES: [&str; 4] = ["translation", "root", "body", "hands"];

/// Joints driven by the body-pose segment, in parameter order.
pub const BODY_POSE_JOINTS: [usize; 14] = [1, 2, 3, 4, 5, 6, 8, 9, 11, 12, 13, 14, 15, 16];
/// Joints driven by the hand segment (the wrists).
pub const HAND_JOINTS: [usize; 2] = [7, 10];

/// First index of joint `j`'s axis-angle triple in the parameter vector.
pub fn joint_param_offset(j: usize) -> usize {
    if j == 0 {
        return 3;
    }
    if let Some(i) = BODY_POSE_JOINTS.iter().position(|&b| b == j) {
        return 6 + 3 * i;
    }
    let i = HAND_JOINTS.iter().position(|&h| h == j).expect("joint index below 17");
    48 + 3 * i
}

/// Segment index of parameter coordinate `i`.
pub fn segment_of(i: usize) -> usize {
    SEGMENTS.iter().position(|r| r.contains(&i)).expect("index below PARAM_DIM")
}

pub fn check_params(x: &[f64]) -> Result<(), BodyError> {
    if x.len() != PARAM_DIM {
        return Err(BodyError::ParamLength(x.len()));
    }
    Ok(())
}

/// Reflects a parameter vector across the x = 0 plane: the translation's x
/// flips, each axis-angle `(x, y, z)` becomes `(x, −y, −z)` and left/right
/// joint blocks swap.
pub fn mirror_params(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; PARAM_DIM];
    out[0] = -x[0];
    out[1] = x[1];
    out[2] = x[2];
    for j in 0..NUM_JOINTS {
        let src = joint_param_offset(j);
        let dst = joint_param_offset(mirror_joint(j));
        out[dst] = x[src];
        out[dst + 1] = -x[src + 1];
        out[dst + 2] = -x[src + 2];
    }
    out
}
