//! Rigid-body algebra: unit quaternions (wxyz), rotation matrices, the
//! two-column 6D rotation encoding, poses, slerp and projected gravity.
//!
//! All quaternions are stored scalar-first. Double cover is left alone by
//! every operation except [`Quat::canonical`], which callers invoke
//! explicitly when they need `w >= 0`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|q| - 1` accepted by [`quat_to_matrix`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

const ROT6D_EPS: f64 = 1e-8;
const SLERP_LINEAR_BELOW: f64 = 1e-6;

/// Unit quaternion, scalar first. Serializes as `[w, x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quat {
    fn from(v: [f64; 4]) -> Self {
        Quat::from_array(v)
    }
}

impl From<Quat> for [f64; 4] {
    fn from(q: Quat) -> Self {
        q.to_array()
    }
}

impl Default for Quat {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quat {
    pub const fn identity() -> Self {
        Quat {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Builds a quaternion and rescales it to unit norm.
    ///
    /// Panics on a zero quaternion; use [`Quat::try_new`] for untrusted input.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::try_new(w, x, y, z).expect("zero-norm quaternion")
    }

    /// Builds a unit quaternion from raw components, renormalizing. Fails on
    /// a zero or non-finite input.
    pub fn try_new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::NonUnitQuaternion { norm: n });
        }
        Ok(Quat {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn from_array(wxyz: [f64; 4]) -> Self {
        Quat {
            w: wxyz[0],
            x: wxyz[1],
            y: wxyz[2],
            z: wxyz[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Quat {
            w: c,
            x: a.x * s,
            y: a.y * s,
            z: a.z * s,
        }
    }

    /// Exponential map: rotation vector (axis * angle) to quaternion.
    pub fn from_scaled_axis(v: &Vector3<f64>) -> Self {
        let theta = v.norm();
        let half = 0.5 * theta;
        let k = if theta < 1e-8 {
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        Quat {
            w: half.cos(),
            x: v.x * k,
            y: v.y * k,
            z: v.z * k,
        }
    }

    /// Logarithm map on the shorter arc: returns axis * angle with angle in
    /// `[0, pi]`.
    pub fn scaled_axis(&self) -> Vector3<f64> {
        let q = self.canonical();
        let v = Vector3::new(q.x, q.y, q.z);
        let n = v.norm();
        if n < 1e-300 {
            return Vector3::zeros();
        }
        let angle = 2.0 * n.atan2(q.w);
        v * (angle / n)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn neg(&self) -> Quat {
        Quat {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Representative with `w >= 0`.
    pub fn canonical(&self) -> Quat {
        if self.w < 0.0 {
            self.neg()
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Inverse of a unit quaternion.
    pub fn inverse(&self) -> Quat {
        self.conjugate()
    }

    /// Hamilton product `self * o`.
    pub fn mul(&self, o: &Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        // v' = v + 2 u x (u x v + w v)
        let u = Vector3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(&t)
    }

    /// Rotation matrix without the unit-norm check of [`quat_to_matrix`].
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Matrix3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }

    /// Quaternion of a rotation matrix (Shepperd's method), renormalized.
    pub fn from_matrix(m: &Matrix3<f64>) -> Quat {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z) = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            (
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            (
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        Quat::new_normalize(w, x, y, z)
    }

    /// Geodesic angle between the rotations represented by `self` and `o`,
    /// in `[0, pi]`.
    pub fn angle_to(&self, o: &Quat) -> f64 {
        let d = self.conjugate().mul(o);
        let v = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        2.0 * v.atan2(d.w.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Rotation matrix of a unit quaternion; errors if `|q|` is off by more than
/// [`UNIT_TOLERANCE`].
pub fn quat_to_matrix(q: &Quat) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NonUnitQuaternion { norm: n });
    }
    Ok(q.to_matrix())
}

/// First two columns of a rotation matrix, packed column-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub fn identity() -> Self {
        Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }
}

pub fn rot6d_encode(r: &Matrix3<f64>) -> Rot6D {
    Rot6D([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
}

/// Gram-Schmidt decode of a (possibly noisy) 6D rotation.
pub fn rot6d_decode(v: &Rot6D) -> Result<Matrix3<f64>> {
    let c1 = Vector3::new(v.0[0], v.0[1], v.0[2]);
    let c2 = Vector3::new(v.0[3], v.0[4], v.0[5]);
    if !(c1.iter().chain(c2.iter()).all(|x| x.is_finite())) {
        return Err(Error::NonFinite("6D rotation"));
    }
    let n1 = c1.norm();
    if n1 < ROT6D_EPS {
        return Err(Error::DegenerateRot6D("first column is zero"));
    }
    let a1 = c1 / n1;
    let b2 = c2 - a1 * a1.dot(&c2);
    let n2 = b2.norm();
    if n2 < ROT6D_EPS * c2.norm().max(1.0) {
        return Err(Error::DegenerateRot6D("columns are parallel"));
    }
    let a2 = b2 / n2;
    let a3 = a1.cross(&a2);
    Ok(Matrix3::from_columns(&[a1, a2, a3]))
}

/// Spherical interpolation along the shorter arc.
pub fn slerp(q0: &Quat, q1: &Quat, t: f64) -> Quat {
    let q1 = if q0.dot(q1) < 0.0 { q1.neg() } else { *q1 };
    let diff = [q1.w - q0.w, q1.x - q0.x, q1.y - q0.y, q1.z - q0.z];
    let sum = [q1.w + q0.w, q1.x + q0.x, q1.y + q0.y, q1.z + q0.z];
    let nd = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ns = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    // angle between the two 4-vectors, accurate at both ends
    let theta = 2.0 * nd.atan2(ns);
    let (a, b) = if theta < SLERP_LINEAR_BELOW {
        (1.0 - t, t)
    } else {
        let s = theta.sin();
        (((1.0 - t) * theta).sin() / s, (t * theta).sin() / s)
    };
    Quat::new_normalize(
        a * q0.w + b * q1.w,
        a * q0.x + b * q1.x,
        a * q0.y + b * q1.y,
        a * q0.z + b * q1.z,
    )
}

/// World gravity direction `(0, 0, -1)` expressed in the base frame.
pub fn projected_gravity(q_root: &Quat) -> Vector3<f64> {
    q_root.inverse().rotate(&Vector3::new(0.0, 0.0, -1.0))
}

/// Heading (yaw-only) part of an orientation.
pub fn yaw_of(q: &Quat) -> f64 {
    let x_axis = q.rotate(&Vector3::x());
    x_axis.y.atan2(x_axis.x)
}

/// Rigid transform: rotate, then translate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            translation: Vector3::zeros(),
            rotation: Quat::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: Quat) -> Self {
        Pose { translation, rotation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(t, Quat::identity())
    }

    pub fn compose(&self, b: &Pose) -> Pose {
        Pose {
            translation: self.translation + self.rotation.rotate(&b.translation),
            rotation: self.rotation.mul(&b.rotation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose {
            translation: -r.rotate(&self.translation),
            rotation: r,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + self.rotation.rotate(p)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.to_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite()) && self.rotation.is_finite()
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn pose_inverse(a: &Pose) -> Pose {
    a.inverse()
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub fn random_quat<R: Rng>(rng: &mut R) -> Quat {
        loop {
            let v: [f64; 4] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            if let Ok(q) = Quat::try_new(v[0], v[1], v[2], v[3]) {
                return q;
            }
        }
    }

    pub fn random_pose<R: Rng>(rng: &mut R) -> Pose {
        Pose::new(
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
            random_quat(rng),
        )
    }
}
