//! Rotations, situated frames and pose error functions.
//!
//! Conventions used throughout the crate:
//!
//! * `z` is up. A situation's forward direction is `R · (0, 1, 0)`.
//! * Yaw is the counterclockwise rotation about `+z` that carries `+y` onto the
//!   forward direction, so the identity faces `+y` and a yaw of `π/2` faces `-x`.
//! * Realigning a scene to a situation moves the situation position to the
//!   origin and turns the forward direction onto `+y`; `+x` is then the
//!   agent's right-hand side and `-x` its left.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

const ORTHO_TOL: f64 = 1e-6;
const DEGENERATE_TOL: f64 = 1e-9;

/// Rotation by `angle` radians about the vertical axis.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NotARotation("non-finite entry".into()));
    }
    let dev = (r.transpose() * r - Matrix3::identity()).amax();
    if dev >= ORTHO_TOL {
        return Err(GeometryError::NotARotation(format!(
            "|RᵀR - I|_max = {dev:.3e}"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() >= ORTHO_TOL {
        return Err(GeometryError::NotARotation(format!("det = {det}")));
    }
    Ok(())
}

/// Continuous 6D rotation encoding: the first two columns of a rotation
/// matrix stacked as `(c0.x, c0.y, c0.z, c1.x, c1.y, c1.z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub fn first(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }
}

/// Decodes a 6D vector by Gram–Schmidt: normalize the first column, remove
/// its component from the second and normalize, third column is the cross
/// product.
pub fn rot6d_to_matrix(v: &Rot6D) -> Result<Matrix3<f64>, GeometryError> {
    if v.0.iter().any(|x| !x.is_finite()) {
        return Err(GeometryError::DegenerateInput("non-finite 6D entry".into()));
    }
    let a = v.first();
    let b = v.second();
    let na = a.norm();
    if na <= DEGENERATE_TOL {
        return Err(GeometryError::DegenerateInput(
            "first column has zero norm".into(),
        ));
    }
    let c0 = a / na;
    let ortho = b - c0 * c0.dot(&b);
    let no = ortho.norm();
    if no <= DEGENERATE_TOL * b.norm().max(1.0) {
        return Err(GeometryError::DegenerateInput(
            "columns are parallel".into(),
        ));
    }
    let c1 = ortho / no;
    let c2 = c0.cross(&c1);
    Ok(Matrix3::from_columns(&[c0, c1, c2]))
}

pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> Result<Rot6D, GeometryError> {
    check_rotation(r)?;
    Ok(Rot6D([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]))
}

/// Unit quaternion in `(w, x, y, z)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    /// Normalizes `(w, x, y, z)`; fails on a zero or non-finite input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n <= DEGENERATE_TOL {
            return Err(GeometryError::DegenerateInput(
                "quaternion has zero norm".into(),
            ));
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = (yaw / 2.0).sin_cos();
        Self {
            w: c,
            x: 0.0,
            y: 0.0,
            z: s,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let Self { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method; the sign is fixed so that `w >= 0`.
    pub fn from_matrix(r: &Matrix3<f64>) -> Result<Self, GeometryError> {
        check_rotation(r)?;
        let tr = r.trace();
        let (w, x, y, z) = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            (
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            (
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            (
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            (
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let q = Self::new(w, x, y, z)?;
        Ok(if q.w < 0.0 {
            Self {
                w: -q.w,
                x: -q.x,
                y: -q.y,
                z: -q.z,
            }
        } else {
            q
        })
    }
}

/// Heading angle of a rotation: the yaw that carries `+y` onto `R · (0,1,0)`
/// after projecting that direction onto the ground plane.
pub fn yaw_of(r: &Matrix3<f64>) -> Result<f64, GeometryError> {
    let hx = r[(0, 1)];
    let hy = r[(1, 1)];
    if hx.hypot(hy) < DEGENERATE_TOL {
        return Err(GeometryError::VerticalHeading);
    }
    Ok(wrap_angle((-hx).atan2(hy)))
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Absolute wrapped difference between two headings, in degrees `[0, 180]`.
pub fn angular_error_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    let d = if d > PI { 2.0 * PI - d } else { d };
    d.to_degrees()
}

/// A grounded pose: position plus a ground-parallel heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SituationVector {
    pub pos: Vector3<f64>,
    rot: Matrix3<f64>,
    /// Euler triple as supplied by an annotation, if any. Pitch is always 0.
    pub euler: Option<[f64; 3]>,
}

impl SituationVector {
    pub fn from_yaw(pos: Vector3<f64>, yaw: f64) -> Self {
        Self {
            pos,
            rot: rot_z(yaw),
            euler: None,
        }
    }

    /// Builds a situation from any rotation by keeping only its heading.
    pub fn from_rotation(pos: Vector3<f64>, r: &Matrix3<f64>) -> Result<Self, GeometryError> {
        Ok(Self::from_yaw(pos, yaw_of(r)?))
    }

    /// Standing at `pos` and facing along the horizontal direction `dir`.
    pub fn facing(pos: Vector3<f64>, dir_x: f64, dir_y: f64) -> Result<Self, GeometryError> {
        if dir_x.hypot(dir_y) < DEGENERATE_TOL {
            return Err(GeometryError::VerticalHeading);
        }
        Ok(Self::from_yaw(pos, (-dir_x).atan2(dir_y)))
    }

    pub fn identity() -> Self {
        Self::from_yaw(Vector3::zeros(), 0.0)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rot
    }

    pub fn yaw(&self) -> f64 {
        // rot is always a pure yaw rotation, so the heading is never vertical
        wrap_angle((-self.rot[(0, 1)]).atan2(self.rot[(1, 1)]))
    }

    /// Unit forward direction in the ground plane.
    pub fn heading(&self) -> Vector3<f64> {
        self.rot * Vector3::y()
    }

    pub fn rot6d(&self) -> Rot6D {
        matrix_to_rot6d(&self.rot).expect("yaw rotations are valid")
    }

    pub fn quaternion(&self) -> Quaternion {
        Quaternion::from_yaw(self.yaw())
    }

    /// Applies the rigid motion `p ↦ rot_z(yaw) p + t` to the pose.
    pub fn transformed(&self, yaw: f64, t: Vector3<f64>) -> Self {
        Self::from_yaw(rot_z(yaw) * self.pos + t, self.yaw() + yaw)
    }
}

/// Expresses points in the situated frame: the situation position becomes
/// the origin and its heading becomes `+y`, with `z` kept vertical.
pub fn realign_frame(points: &[Vector3<f64>], s: &SituationVector) -> Vec<Vector3<f64>> {
    let inv = rot_z(-s.yaw());
    points.iter().map(|p| inv * (p - s.pos)).collect()
}

/// Horizontal distance between two positions.
pub fn planar_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}
