//! Signed distance to a posed capsule body and region-to-region distances.

use super::fk::PosedBody;
use super::BodyError;
use crate::autodiff::sq_dist;
use crate::geometry::{add, dist, dot, scale, sub, Vec3};

/// Distance from `p` to the segment `a`–`b`.
pub fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist(p, add(a, scale(ab, t)))
}

/// Minimum over capsules of (segment distance − radius): negative inside the
/// body, positive outside.
pub fn capsule_sdf(p: Vec3, body: &PosedBody) -> f64 {
    body.capsules
        .iter()
        .map(|c| segment_distance(p, c.a, c.b) - c.radius)
        .fold(f64::INFINITY, f64::min)
}

/// Smallest squared distance between two point sets, by brute force.
pub fn min_sq_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut best = f64::INFINITY;
    for p in a {
        for q in b {
            best = best.min(sq_dist(p, q));
        }
    }
    best
}

/// Minimum Euclidean distance between region `ri` of `a` and region `rj` of
/// `b`.
pub fn region_min_distance(a: &PosedBody, ri: usize, b: &PosedBody, rj: usize) -> Result<f64, BodyError> {
    Ok(min_sq_distance(a.region_vertices(ri)?, b.region_vertices(rj)?).sqrt())
}
