//! Boxes, rigid poses, and the frame conversions between agents.

use cooptrack_numerics::rotation::{mat3_mul, mat3_transpose, mat3_vec, wrap_angle, yaw_of, IDENTITY3};
use cooptrack_numerics::{Mat3, Matrix, Vec3};
use serde::{Deserialize, Serialize};

use crate::error::{CoopError, Result};

/// Object classes produced by the simulator.
pub const CLASS_NAMES: [&str; 3] = ["car", "pedestrian", "truck"];
pub const CAR: usize = 0;
pub const PEDESTRIAN: usize = 1;
pub const TRUCK: usize = 2;

/// `[x, y, z, w, l, h, θ, vx, vy]` plus class and confidence. `l` runs along
/// the heading, `w` across it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub class_label: usize,
    pub score: f64,
}

impl Box3D {
    pub fn center(&self) -> Vec3 {
        [self.x, self.y, self.z]
    }

    pub fn center_distance(&self, other: &Box3D) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return Err(CoopError::Validation(format!(
                "box dimensions must be positive, got w={} l={} h={}",
                self.w, self.l, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(CoopError::Validation(format!("box score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    /// The nine numeric box fields in `[x, y, z, w, l, h, θ, vx, vy]` order.
    pub fn to_array(&self) -> [f64; 9] {
        [self.x, self.y, self.z, self.w, self.l, self.h, self.theta, self.vx, self.vy]
    }

    pub fn from_array(v: [f64; 9], class_label: usize, score: f64) -> Self {
        Self {
            x: v[0],
            y: v[1],
            z: v[2],
            w: v[3],
            l: v[4],
            h: v[5],
            theta: wrap_angle(v[6]),
            vx: v[7],
            vy: v[8],
            class_label,
            score,
        }
    }

    /// Corner `i` uses signs `(±l/2, ±w/2, ±h/2)` with x varying slowest.
    pub fn corners_local(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.theta.sin_cos();
        let mut out = [[0.0; 3]; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let sx = if i & 4 == 0 { 1.0 } else { -1.0 };
            let sy = if i & 2 == 0 { 1.0 } else { -1.0 };
            let sz = if i & 1 == 0 { 1.0 } else { -1.0 };
            let (px, py, pz) = (sx * self.l / 2.0, sy * self.w / 2.0, sz * self.h / 2.0);
            *o = [c * px - s * py, s * px + c * py, pz];
        }
        out
    }

    /// Volume IoU of two boxes after moving them onto a common center and
    /// heading; only size differences count.
    pub fn aligned_iou(&self, other: &Box3D) -> f64 {
        let inter = self.w.min(other.w) * self.l.min(other.l) * self.h.min(other.h);
        let union = self.w * self.l * self.h + other.w * other.l * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Center-relative corners as an 8×3 matrix.
pub fn corners_from_box(b: &Box3D) -> Result<Matrix> {
    if !(b.w > 0.0 && b.l > 0.0 && b.h > 0.0) {
        return Err(CoopError::Validation(format!(
            "corners need positive dimensions, got w={} l={} h={}",
            b.w, b.l, b.h
        )));
    }
    Ok(Matrix::from_rows(&b.corners_local()))
}

/// Rigid transform `p ↦ R p + t` taking points from a source frame into a
/// target frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Mat3,
    pub t: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            r: IDENTITY3,
            t: [0.0; 3],
        }
    }

    pub fn new(r: Mat3, t: Vec3) -> Self {
        Self { r, t }
    }

    pub fn from_yaw(yaw: f64, t: Vec3) -> Self {
        Self {
            r: cooptrack_numerics::rotation::rot_z(yaw),
            t,
        }
    }

    pub fn yaw(&self) -> f64 {
        yaw_of(&self.r)
    }

    pub fn inverse(&self) -> Self {
        let rt = mat3_transpose(&self.r);
        let mt = mat3_vec(&rt, &self.t);
        Self {
            r: rt,
            t: [-mt[0], -mt[1], -mt[2]],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        let t = mat3_vec(&self.r, &other.t);
        Self {
            r: mat3_mul(&self.r, &other.r),
            t: [t[0] + self.t[0], t[1] + self.t[1], t[2] + self.t[2]],
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let q = mat3_vec(&self.r, p);
        [q[0] + self.t[0], q[1] + self.t[1], q[2] + self.t[2]]
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        mat3_vec(&self.r, v)
    }

    /// Moves a box into the target frame. The heading absorbs the yaw part
    /// of the rotation; boxes stay upright.
    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let c = self.apply(&b.center());
        let v = self.rotate(&[b.vx, b.vy, 0.0]);
        Box3D {
            x: c[0],
            y: c[1],
            z: c[2],
            theta: wrap_angle(b.theta + self.yaw()),
            vx: v[0],
            vy: v[1],
            ..*b
        }
    }

    pub fn is_valid(&self) -> bool {
        cooptrack_numerics::rotation::orthonormality_error(&self.r) < 1e-6
            && (cooptrack_numerics::rotation::det3(&self.r) - 1.0).abs() < 1e-6
            && self.t.iter().all(|x| x.is_finite())
    }
}

/// `P̃ = P Rᵀ + t` on an N×3 point matrix.
pub fn spatial_transform(points: &Matrix, pose: &Pose) -> Matrix {
    assert_eq!(points.cols(), 3, "points must be N×3");
    let mut out = Matrix::zeros(points.rows(), 3);
    for i in 0..points.rows() {
        let p = points.row(i);
        out.row_mut(i).copy_from_slice(&pose.apply(&[p[0], p[1], p[2]]));
    }
    out
}

/// Axis-aligned horizontal extent `[x_min, x_max, y_min, y_max]`.
pub fn in_range(p: &Vec3, horizontal: &[f64; 4], height: &[f64; 2]) -> bool {
    p[0] >= horizontal[0]
        && p[0] <= horizontal[1]
        && p[1] >= horizontal[2]
        && p[1] <= horizontal[3]
        && p[2] >= height[0]
        && p[2] <= height[1]
}
