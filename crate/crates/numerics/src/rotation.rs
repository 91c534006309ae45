//! 3×3 rotations and the continuous 6D rotation encoding.
//!
//! The 6D code is the first two columns of `R`, stacked column by column.
//! Decoding Gram–Schmidt-orthonormalizes the two columns and completes the
//! frame with their cross product.

use crate::error::{NumericsError, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

const DEGENERATE_EPS: f64 = 1e-9;

pub fn rot6d_encode(r: &Mat3) -> Result<[f64; 6]> {
    if orthonormality_error(r) > 1e-6 {
        return Err(NumericsError::Degenerate("encode expects a rotation matrix".into()));
    }
    Ok([r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]])
}

pub fn rot6d_decode(v: &[f64; 6]) -> Result<Mat3> {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = norm(&a1);
    if n1 < DEGENERATE_EPS {
        return Err(NumericsError::Degenerate("first 6D column is zero".into()));
    }
    let b1 = scale(&a1, 1.0 / n1);
    let proj = dot3(&b1, &a2);
    let resid = sub(&a2, &scale(&b1, proj));
    let n2 = norm(&resid);
    if n2 < DEGENERATE_EPS * norm(&a2).max(1.0) {
        return Err(NumericsError::Degenerate("6D columns are parallel or zero".into()));
    }
    let b2 = scale(&resid, 1.0 / n2);
    let b3 = cross(&b1, &b2);
    Ok([[b1[0], b2[0], b3[0]], [b1[1], b2[1], b3[1]], [b1[2], b2[2], b3[2]]])
}

/// Rotation about +z by `yaw` radians.
pub fn rot_z(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rodrigues rotation about a (not necessarily unit) axis.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let n = norm(axis);
    if n == 0.0 || angle == 0.0 {
        return IDENTITY3;
    }
    let [x, y, z] = scale(axis, 1.0 / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[j][i];
        }
    }
    o
}

pub fn mat3_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [dot3(&a[0], v), dot3(&a[1], v), dot3(&a[2], v)]
}

pub fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Max-entry deviation of `RᵀR` from the identity.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    let rtr = mat3_mul(&mat3_transpose(r), r);
    let mut e: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            e = e.max((rtr[i][j] - target).abs());
        }
    }
    e
}

/// Yaw (rotation about z) of a rotation matrix.
pub fn yaw_of(r: &Mat3) -> f64 {
    r[1][0].atan2(r[0][0])
}

/// Geodesic angle between two rotations.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let rel = mat3_mul(&mat3_transpose(a), b);
    let tr = rel[0][0] + rel[1][1] + rel[2][2];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip() {
        let v = rot6d_encode(&IDENTITY3).unwrap();
        assert_eq!(v, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(rot6d_decode(&v).unwrap(), IDENTITY3);
    }

    #[test]
    fn yaw_quarter_turn_round_trips() {
        let r = rot_z(std::f64::consts::FRAC_PI_2);
        let back = rot6d_decode(&rot6d_encode(&r).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[i][j] - r[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(rot6d_decode(&[0.0; 6]).is_err());
        assert!(rot6d_decode(&[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).is_err());
        assert!(rot6d_decode(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn encode_rejects_non_rotation() {
        let mut r = IDENTITY3;
        r[0][0] = 2.0;
        assert!(rot6d_encode(&r).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }
}
