//! Shared geometric and temporal primitives.
//!
//! Planar poses carry their heading wrapped to (-pi, pi]. Full 3D rigid
//! transforms keep a proper rotation matrix (orthonormal, det +1); they are
//! produced by scan registration and consumed by everything that projects
//! back down to the plane.

use nalgebra::{Matrix3, Point3 as NPoint3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

/// A 3D point in meters. The owning container (scan, cloud, map) carries the
/// frame tag; points themselves are frame-agnostic values.
pub type Point3 = NPoint3<f64>;

/// Coordinate frame a cloud or pose is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    /// Vehicle body: x forward, y left, z up, origin at the rear axle center.
    Body,
    /// Unified world/map frame.
    Map,
    /// Raw sensor frame, prior to extrinsic correction.
    Sensor,
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frame::Body => write!(f, "body"),
            Frame::Map => write!(f, "map"),
            Frame::Sensor => write!(f, "sensor"),
        }
    }
}

impl std::str::FromStr for Frame {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "body" => Ok(Frame::Body),
            "map" => Ok(Frame::Map),
            "sensor" => Ok(Frame::Sensor),
            other => Err(format!("unknown frame tag: {other}")),
        }
    }
}

/// Seconds since scenario start. Non-negative by construction in the
/// simulator; ordering is the plain float ordering.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Timestamp(pub f64);

impl Timestamp {
    pub fn seconds(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}s", self.0)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Planar pose (x, y, heading). Heading is always stored wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Pose2 {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    /// `self` then `other`: other is expressed in self's frame.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2 {
            x: self.x + c * other.x - s * other.y,
            y: self.y + s * other.x + c * other.y,
            theta: wrap_angle(self.theta + other.theta),
        }
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2 {
            x: -(c * self.x + s * self.y),
            y: s * self.x - c * self.y,
            theta: wrap_angle(-self.theta),
        }
    }

    /// Relative pose taking `self` to `other` (`self.inverse() * other`).
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn transform_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * x - s * y, self.y + s * x + c * y)
    }

    pub fn position_distance(&self, other: &Pose2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

impl fmt::Display for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3}, {:.4} rad)", self.x, self.y, self.theta)
    }
}

/// Rigid transform in SE(3). `rotation` stays orthonormal with det +1; the
/// constructors and `compose` preserve this, `renormalize` repairs drift
/// accumulated over long iterative pipelines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform3 {
    pub fn identity() -> Self {
        RigidTransform3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform3 {
            rotation,
            translation,
        }
    }

    /// Planar pose embedded in 3D: yaw about z, zero elevation.
    pub fn from_pose2(p: &Pose2) -> Self {
        let (s, c) = p.theta.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        RigidTransform3 {
            rotation,
            translation: Vector3::new(p.x, p.y, 0.0),
        }
    }

    /// Rotation about z by `yaw` with translation (x, y, 0).
    pub fn from_yaw_xy(yaw: f64, x: f64, y: f64) -> Self {
        Self::from_pose2(&Pose2::new(x, y, yaw))
    }

    /// Axis-angle exponential. `omega` is the rotation vector in radians.
    pub fn from_rotvec_translation(omega: Vector3<f64>, t: Vector3<f64>) -> Self {
        RigidTransform3 {
            rotation: rotvec_to_matrix(omega),
            translation: t,
        }
    }

    pub fn compose(&self, other: &RigidTransform3) -> RigidTransform3 {
        RigidTransform3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform3 {
        let rt = self.rotation.transpose();
        RigidTransform3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Projects onto the plane: (x, y, yaw about z).
    pub fn to_pose2(&self) -> Pose2 {
        Pose2::new(
            self.translation.x,
            self.translation.y,
            self.rotation[(1, 0)].atan2(self.rotation[(0, 0)]),
        )
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Pulls the rotation back onto SO(3) via polar decomposition. Cheap
    /// insurance after long chains of composes.
    pub fn renormalize(&mut self) {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            // flip the axis of least significance
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        self.rotation = r;
    }

    /// Max deviation of R^T R from identity; 0 for a perfect rotation.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.amax()
    }

    /// Rotation angle (radians) of `self.rotation`.
    pub fn rotation_angle(&self) -> f64 {
        let tr = self.rotation.trace();
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Rodrigues formula; small angles fall back to the second-order expansion.
pub fn rotvec_to_matrix(omega: Vector3<f64>) -> Matrix3<f64> {
    let angle = omega.norm();
    let k = skew(omega);
    if angle < 1e-12 {
        Matrix3::identity() + k + 0.5 * (k * k)
    } else {
        Matrix3::identity() + (angle.sin() / angle) * k
            + ((1.0 - angle.cos()) / (angle * angle)) * (k * k)
    }
}

pub fn skew(v: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn wrap_lands_in_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI), PI);
        assert_relative_eq!(wrap_angle(-3.0 * PI), PI);
        assert_relative_eq!(wrap_angle(2.0 * PI), 0.0);
        assert_relative_eq!(wrap_angle(0.5), 0.5);
    }

    #[test]
    fn compose_with_identity_is_noop() {
        let p = Pose2::new(3.0, -2.0, 1.2);
        let id = Pose2::identity();
        assert_eq!(p.compose(&id), p);
        let q = id.compose(&p);
        assert_relative_eq!(q.x, p.x);
        assert_relative_eq!(q.y, p.y);
        assert_relative_eq!(q.theta, p.theta);
    }

    #[test]
    fn known_compose() {
        // quarter-turn left then advance 1 m along new heading: ends at (0, 1)
        let a = Pose2::new(0.0, 0.0, PI / 2.0);
        let b = Pose2::new(1.0, 0.0, 0.0);
        let c = a.compose(&b);
        assert_relative_eq!(c.x, 0.0, epsilon = 1e-15);
        assert_relative_eq!(c.y, 1.0);
        assert_relative_eq!(c.theta, PI / 2.0);
    }

    #[test]
    fn se3_projection_recovers_planar_pose() {
        let p = Pose2::new(4.0, -1.5, 2.9);
        let t = RigidTransform3::from_pose2(&p);
        let back = t.to_pose2();
        assert_relative_eq!(back.x, p.x, epsilon = 1e-12);
        assert_relative_eq!(back.y, p.y, epsilon = 1e-12);
        assert_relative_eq!(back.theta, p.theta, epsilon = 1e-12);
    }

    #[test]
    fn rotation_stays_orthonormal_through_compose_chains() {
        let mut t = RigidTransform3::identity();
        let step = RigidTransform3::from_rotvec_translation(
            Vector3::new(0.01, 0.02, -0.015),
            Vector3::new(0.5, -0.2, 0.1),
        );
        for _ in 0..10_000 {
            t = t.compose(&step);
        }
        assert!(t.orthonormality_error() < 1e-9);
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn renormalize_repairs_a_perturbed_rotation() {
        let mut t = RigidTransform3::from_yaw_xy(0.7, 1.0, 2.0);
        t.rotation[(0, 0)] += 1e-6;
        assert!(t.orthonormality_error() > 1e-7);
        t.renormalize();
        assert!(t.orthonormality_error() < 1e-12);
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent(a in -50.0f64..50.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w), w);
        }

        #[test]
        fn pose_compose_inverse_is_identity(
            x in -100.0f64..100.0, y in -100.0f64..100.0, th in -10.0f64..10.0,
        ) {
            let p = Pose2::new(x, y, th);
            let r = p.compose(&p.inverse());
            prop_assert!(r.x.abs() < 1e-12 * (1.0 + x.abs() + y.abs()));
            prop_assert!(r.y.abs() < 1e-12 * (1.0 + x.abs() + y.abs()));
            prop_assert!(wrap_angle(r.theta).abs() < 1e-12);
        }

        #[test]
        fn transform_preserves_pairwise_distance(
            yaw in -3.0f64..3.0,
            pitchish in -1.0f64..1.0,
            tx in -10.0f64..10.0,
            ax in -5.0f64..5.0, ay in -5.0f64..5.0, az in -5.0f64..5.0,
            bx in -5.0f64..5.0, by in -5.0f64..5.0, bz in -5.0f64..5.0,
        ) {
            let t = RigidTransform3::from_rotvec_translation(
                Vector3::new(pitchish, 0.3 * pitchish, yaw),
                Vector3::new(tx, -tx, 0.5),
            );
            let a = Point3::new(ax, ay, az);
            let b = Point3::new(bx, by, bz);
            let d0 = (a - b).norm();
            let d1 = (t.transform_point(&a) - t.transform_point(&b)).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }
    }
}
