//! Small fixed-size 3-D helpers used by the plain (non-tape) code paths.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Below this `s = θ²` the Rodrigues coefficients use their Taylor series;
/// the closed forms lose digits to cancellation there.
const SERIES_LIMIT: f64 = 1e-2;

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j][i] = v;
        }
    }
    out
}

/// Rotation by `angle` about the world +y (up) axis.
pub fn rotation_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// `(sin θ / θ, d/ds)` with `s = θ²`.
pub fn rodrigues_coeff_a(s: f64) -> (f64, f64) {
    if s < SERIES_LIMIT {
        let v = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0 + s * s * s * s / 362_880.0;
        let d = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0 + s * s * s / 90_720.0;
        (v, d)
    } else {
        let t = s.sqrt();
        let (sin, cos) = t.sin_cos();
        (sin / t, (t * cos - sin) / (2.0 * t * s))
    }
}

/// `((1 − cos θ) / θ², d/ds)` with `s = θ²`.
pub fn rodrigues_coeff_b(s: f64) -> (f64, f64) {
    if s < SERIES_LIMIT {
        let v = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40_320.0 + s * s * s * s / 3_628_800.0;
        let d = -1.0 / 24.0 + s / 360.0 - s * s / 13_440.0 + s * s * s / 907_200.0;
        (v, d)
    } else {
        let t = s.sqrt();
        let sin = t.sin();
        let one_minus_cos = 2.0 * (0.5 * t).sin().powi(2);
        (one_minus_cos / s, (t * sin - 2.0 * one_minus_cos) / (2.0 * s * s))
    }
}

/// Rodrigues: `R = I + A·K + B·K²`, `K = [ω]×`.
pub fn axis_angle_to_matrix(w: Vec3) -> Mat3 {
    let s = dot(w, w);
    let a = rodrigues_coeff_a(s).0;
    let b = rodrigues_coeff_b(s).0;
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

pub fn skew(w: Vec3) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

/// Inverse of [`axis_angle_to_matrix`] with angle in `[0, π]`, via a
/// Shepperd quaternion so it stays accurate near both 0 and π.
pub fn matrix_to_axis_angle(r: &Mat3) -> Vec3 {
    let tr = r[0][0] + r[1][1] + r[2][2];
    // (w, x, y, z)
    let q = if tr > 0.0 {
        let s = 2.0 * (1.0 + tr).sqrt();
        [0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = 2.0 * (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt();
        [(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s]
    } else if r[1][1] > r[2][2] {
        let s = 2.0 * (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt();
        [(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s]
    } else {
        let s = 2.0 * (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt();
        [(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s]
    };
    let (mut w, mut v) = (q[0], [q[1], q[2], q[3]]);
    if w < 0.0 {
        w = -w;
        v = scale(v, -1.0);
    }
    let vn = norm(v);
    if vn < 1e-300 {
        return [0.0; 3];
    }
    let angle = 2.0 * vn.atan2(w);
    scale(v, angle / vn)
}

/// Heading of a body whose facing direction is local +z: the yaw angle of
/// `R·ẑ` projected onto the ground plane.
pub fn heading_yaw(r: &Mat3) -> f64 {
    r[0][2].atan2(r[2][2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = axis_angle_to_matrix([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let x = mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!(dist(x, [0.0, 1.0, 0.0]) < 1e-15);
    }

    #[test]
    fn coefficients_continuous_at_series_switch() {
        let below = SERIES_LIMIT * (1.0 - 1e-12);
        let above = SERIES_LIMIT * (1.0 + 1e-12);
        for f in [rodrigues_coeff_a, rodrigues_coeff_b] {
            let (va, da) = f(below);
            let (vb, db) = f(above);
            assert!((va - vb).abs() < 1e-13);
            assert!((da - db).abs() < 1e-10, "{da} vs {db}");
        }
    }

    #[test]
    fn log_map_near_pi() {
        let w = [0.0, std::f64::consts::PI - 1e-9, 0.0];
        let r = axis_angle_to_matrix(w);
        let back = axis_angle_to_matrix(matrix_to_axis_angle(&r));
        assert!(close(&r, &back, 1e-14));
    }

    proptest! {
        #[test]
        fn log_exp_roundtrip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, mag in 0.0f64..3.1) {
            let n = norm([x, y, z]);
            prop_assume!(n > 1e-3);
            let w = scale([x, y, z], mag / n);
            let r = axis_angle_to_matrix(w);
            let w2 = matrix_to_axis_angle(&r);
            prop_assert!(close(&r, &axis_angle_to_matrix(w2), 1e-13));
            // rotations stay orthonormal
            prop_assert!(close(&mat_mul(&r, &transpose(&r)), &IDENTITY, 1e-14));
        }
    }
}
