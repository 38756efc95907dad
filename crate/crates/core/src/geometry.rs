//! Rigid poses and constant-curvature arc propagation.
//!
//! All lengths are millimetres and all angles radians. A pose's local `+z`
//! axis is the tip heading. The bend plane of an arc is selected by a roll
//! angle measured in the tip frame: roll `0` curves toward local `+x`, roll
//! `π/2` toward local `+y`.

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Tolerance used when checking that a direction is unit length.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        Self { position, orientation }
    }

    pub fn from_translation(position: Vec3) -> Self {
        Self::new(position, UnitQuaternion::identity())
    }

    /// Pose at `position` whose heading is `heading`, using the minimal
    /// rotation from `+z`. Antiparallel headings rotate about `+x`.
    pub fn from_heading(position: Vec3, heading: &Vec3) -> Self {
        Self::new(position, rotation_between(&Vec3::z(), heading))
    }

    pub fn heading(&self) -> Vec3 {
        self.orientation * Vec3::z()
    }

    /// Tip-frame `+x` expressed in the parent frame.
    pub fn lateral_x(&self) -> Vec3 {
        self.orientation * Vec3::x()
    }

    pub fn lateral_y(&self) -> Vec3 {
        self.orientation * Vec3::y()
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.orientation.to_rotation_matrix().matrix()
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.orientation * other.position,
            orientation: self.orientation * other.orientation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose {
            position: -(inv * self.position),
            orientation: inv,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.position + self.orientation * p
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.orientation * v
    }

    /// True when the rotation matrix is orthonormal with determinant +1.
    pub fn is_orthonormal(&self, tol: f64) -> bool {
        is_rotation(&self.rotation_matrix(), tol)
    }

    /// Largest absolute difference in position and rotation-matrix entries.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let dp = (self.position - other.position).amax();
        let dr = (self.rotation_matrix() - other.rotation_matrix()).amax();
        dp.max(dr)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    position: [f64; 3],
    /// Quaternion as `[w, x, y, z]`.
    orientation: [f64; 4],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let q = self.orientation.quaternion();
        PoseRepr {
            position: [self.position.x, self.position.y, self.position.z],
            orientation: [q.w, q.i, q.j, q.k],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        let [w, x, y, z] = r.orientation;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if q.norm() < 1e-12 {
            return Err(serde::de::Error::custom("zero quaternion in pose"));
        }
        // stored unit quaternions load bit-exact; hand-written ones are normalized
        let orientation = if (q.norm() - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Pose::new(Vec3::from(r.position), orientation))
    }
}

pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let gram = m.transpose() * m - Matrix3::identity();
    gram.amax() <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Minimal rotation taking direction `from` onto direction `to`.
pub fn rotation_between(from: &Vec3, to: &Vec3) -> UnitQuaternion<f64> {
    let a = from.normalize();
    let b = to.normalize();
    match UnitQuaternion::rotation_between(&a, &b) {
        Some(q) => q,
        None => {
            // antiparallel: any axis perpendicular to `a`
            let axis = any_perpendicular(&a);
            UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), std::f64::consts::PI)
        }
    }
}

/// Some unit vector perpendicular to `v`.
pub fn any_perpendicular(v: &Vec3) -> Vec3 {
    let helper = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    v.cross(&helper).normalize()
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// Pose reached after inserting arclength `s` along a circle of curvature
/// `curvature` whose bend plane is selected by `roll` in the start frame.
///
/// The tip frame is carried along the arc without twisting about the heading,
/// so consecutive arcs with the same roll compose into one longer arc.
pub fn propagate_arc(start: &Pose, curvature: f64, roll: f64, s: f64) -> Pose {
    let theta = curvature * s;
    // (1 - cos θ)/κ and sin θ/κ, both well conditioned as κ → 0
    let (lateral, axial) = if curvature == 0.0 {
        (0.0, s)
    } else {
        let half = 0.5 * theta;
        (2.0 * half.sin() * half.sin() / curvature, theta.sin() / curvature)
    };
    let (sr, cr) = roll.sin_cos();
    let local = Vec3::new(lateral * cr, lateral * sr, axial);
    let axis = Unit::new_unchecked(Vec3::new(-sr, cr, 0.0));
    let turn = UnitQuaternion::from_axis_angle(&axis, theta);
    Pose {
        position: start.position + start.orientation * local,
        orientation: start.orientation * turn,
    }
}

/// Pose `r` with `a ∘ r = b`.
pub fn relative_pose(a: &Pose, b: &Pose) -> Pose {
    a.inverse().compose(b)
}

/// Angle between two unit directions, in `[0, π]`.
pub fn angular_deviation(d1: &Vec3, d2: &Vec3) -> Result<f64> {
    for d in [d1, d2] {
        if (d.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::Precondition(format!(
                "direction is not unit length (norm {})",
                d.norm()
            )));
        }
    }
    Ok(d1.cross(d2).norm().atan2(d1.dot(d2)))
}

/// A constant-curvature piece of needle path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub start: Pose,
    /// 1/mm, non-negative.
    pub curvature: f64,
    /// mm, positive.
    pub arclength: f64,
    /// Bend-plane roll in the start tip frame.
    pub roll: f64,
}

impl Arc {
    pub fn new(start: Pose, curvature: f64, roll: f64, arclength: f64) -> Self {
        Self {
            start,
            curvature,
            arclength,
            roll,
        }
    }

    pub fn pose_at(&self, s: f64) -> Pose {
        propagate_arc(&self.start, self.curvature, self.roll, s)
    }

    pub fn end(&self) -> Pose {
        self.pose_at(self.arclength)
    }

    /// Splits the arc at arclength `s` (strictly inside the arc).
    pub fn split(&self, s: f64) -> (Arc, Arc) {
        let first = Arc::new(self.start, self.curvature, self.roll, s);
        let second = Arc::new(self.pose_at(s), self.curvature, self.roll, self.arclength - s);
        (first, second)
    }

    /// Bend direction in the parent frame (unit, perpendicular to the start heading).
    pub fn bend_direction(&self) -> Vec3 {
        let (sr, cr) = self.roll.sin_cos();
        self.start.orientation * Vec3::new(cr, sr, 0.0)
    }
}

pub fn path_length(path: &[Arc]) -> f64 {
    path.iter().map(|a| a.arclength).sum()
}

/// Pose at arclength `s` along a chained path, clamped to its ends.
pub fn path_pose_at(path: &[Arc], s: f64) -> Option<Pose> {
    let first = path.first()?;
    if s <= 0.0 {
        return Some(first.start);
    }
    let mut acc = 0.0;
    for arc in path {
        if s <= acc + arc.arclength {
            return Some(arc.pose_at(s - acc));
        }
        acc += arc.arclength;
    }
    path.last().map(Arc::end)
}

/// Points sampled along a path every `step` mm, always including both ends.
pub fn sample_path(path: &[Arc], step: f64) -> Vec<(f64, Vec3)> {
    let mut out = Vec::new();
    let mut offset = 0.0;
    for (i, arc) in path.iter().enumerate() {
        let n = (arc.arclength / step).ceil().max(1.0) as usize;
        let start_k = if i == 0 { 0 } else { 1 };
        for k in start_k..=n {
            let s = arc.arclength * k as f64 / n as f64;
            out.push((offset + s, arc.pose_at(s).position));
        }
        offset += arc.arclength;
    }
    out
}

/// Rotation by `yaw` about the tip-frame `y` axis followed by `pitch` about
/// the tip-frame `x` axis.
pub fn yaw_pitch_rotation(yaw: f64, pitch: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vec3::y_axis(), yaw) * UnitQuaternion::from_axis_angle(&Vec3::x_axis(), pitch)
}

/// Yaw and pitch (tip-frame) that turn the heading of `pose` onto `dir`.
pub fn yaw_pitch_toward(pose: &Pose, dir: &Vec3) -> (f64, f64) {
    let local = pose.orientation.inverse() * dir.normalize();
    // heading after yaw(ψ)·pitch(φ) applied to +z: (cos φ sin ψ, -sin φ, cos φ cos ψ)
    let pitch = (-local.y).clamp(-1.0, 1.0).asin();
    let yaw = local.x.atan2(local.z);
    (yaw, pitch)
}

pub fn rotation_from_matrix(m: &Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m))
}
