//! Rigid-body poses built from a unit quaternion and a translation vector.
//!
//! Poses are exchanged as flat arrays `[qw, qx, qy, qz, tx, ty, tz]` with an
//! optional trailing reserved `0.0`, so both 7- and 8-element arrays parse.
//! Composition follows the usual convention: `a.compose(&b)` first applies
//! `b` in `a`'s frame, then `a` itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How far a quaternion norm may stray from 1 before we reject it.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("pose array has {0} elements, expected 7 or 8")]
    BadLength(usize),
    #[error("quaternion norm {0} is outside the unit tolerance")]
    NotUnit(f64),
    #[error("pose array contains a non-finite component")]
    NonFinite,
}

/// Unit quaternion stored as (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Quaternion, PoseError> {
        let q = Quaternion { w, x, y, z };
        if ![w, x, y, z].iter().all(|c| c.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        let norm = q.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(PoseError::NotUnit(norm));
        }
        Ok(q)
    }

    /// Builds a unit quaternion from an axis-angle rotation. The axis does
    /// not need to be normalised; a zero axis yields the identity.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Quaternion {
        let len = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if len == 0.0 {
            return Quaternion::IDENTITY;
        }
        let half = angle / 2.0;
        let s = half.sin() / len;
        Quaternion {
            w: half.cos(),
            x: axis[0] * s,
            y: axis[1] * s,
            z: axis[2] * s,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Renormalises to counter drift from repeated composition.
    pub fn normalized(&self) -> Quaternion {
        let n = self.norm();
        Quaternion { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn conjugate(&self) -> Quaternion {
        Quaternion { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn multiply(&self, o: &Quaternion) -> Quaternion {
        Quaternion {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
        .normalized()
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        // q * (0, v) * q^-1 expanded to avoid building intermediate quaternions.
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let (vx, vy, vz) = (v[0], v[1], v[2]);
        let tx = 2.0 * (y * vz - z * vy);
        let ty = 2.0 * (z * vx - x * vz);
        let tz = 2.0 * (x * vy - y * vx);
        [
            vx + w * tx + (y * tz - z * ty),
            vy + w * ty + (z * tx - x * tz),
            vz + w * tz + (x * ty - y * tx),
        ]
    }

    /// Smallest rotation angle in radians taking `self` to `other`.
    /// Computed via atan2 on the relative rotation, which stays accurate
    /// for tiny angles where acos of the dot product loses precision.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        let d = self.conjugate().multiply(other);
        let vec_norm = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        2.0 * vec_norm.atan2(d.w.abs())
    }
}

/// Rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: [f64; 3],
}

impl Pose {
    pub const IDENTITY: Pose =
        Pose { rotation: Quaternion::IDENTITY, translation: [0.0, 0.0, 0.0] };

    pub fn new(rotation: Quaternion, translation: [f64; 3]) -> Pose {
        Pose { rotation, translation }
    }

    pub fn from_translation(translation: [f64; 3]) -> Pose {
        Pose { rotation: Quaternion::IDENTITY, translation }
    }

    /// Parses `[qw, qx, qy, qz, tx, ty, tz]` with an optional trailing
    /// reserved element that must be present only as padding.
    pub fn from_array(values: &[f64]) -> Result<Pose, PoseError> {
        if values.len() != 7 && values.len() != 8 {
            return Err(PoseError::BadLength(values.len()));
        }
        if !values.iter().all(|c| c.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        let rotation = Quaternion::new(values[0], values[1], values[2], values[3])?;
        Ok(Pose { rotation, translation: [values[4], values[5], values[6]] })
    }

    /// Serialises to the canonical 7-element array.
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.rotation.w,
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    /// `self` then `other`: the result maps a point through `other` first,
    /// then through `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotated = self.rotation.rotate(other.translation);
        Pose {
            rotation: self.rotation.multiply(&other.rotation),
            translation: [
                self.translation[0] + rotated[0],
                self.translation[1] + rotated[1],
                self.translation[2] + rotated[2],
            ],
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.conjugate();
        let t = inv_rot.rotate(self.translation);
        Pose { rotation: inv_rot, translation: [-t[0], -t[1], -t[2]] }
    }

    /// Pose of `child` expressed in `parent`'s frame, both given in a shared
    /// frame: `parent.compose(result) == child`.
    pub fn relative_to(&self, parent: &Pose) -> Pose {
        parent.inverse().compose(self)
    }

    pub fn apply(&self, point: [f64; 3]) -> [f64; 3] {
        let r = self.rotation.rotate(point);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        distance(self.translation, other.translation)
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}
