//! Rigid-body poses, se(3) tangent vectors, and the pinhole camera model.
//!
//! Conventions used across the whole workspace:
//!
//! * Poses map camera coordinates to world coordinates (camera-to-world).
//! * Quaternions are scalar-first `(w, x, y, z)` in every API and binary
//!   format. Trajectory text files use the TUM field order
//!   `timestamp tx ty tz qx qy qz qw` (scalar last) for interoperability.
//! * Twists are ordered `(rx, ry, rz, tx, ty, tz)`: rotation first.
//! * Pixel `(i, j)` covers the continuous square `[i, i+1) x [j, j+1)`, so
//!   its center sits at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Angle threshold below which rotation formulas switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("depth {depth} is not a positive finite number")]
    InvalidDepth { depth: f64 },
    #[error("rotation angle {angle} rad is too close to pi for a stable log")]
    NearSingularRotation { angle: f64 },
    #[error("malformed trajectory line {line}: {reason}")]
    MalformedTrajectory { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Rigid transform in SE(3), stored as unit quaternion plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    /// Builds a pose from scalar-first quaternion components; renormalizes.
    pub fn from_parts(tx: f64, ty: f64, tz: f64, qw: f64, qx: f64, qy: f64, qz: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Pose::new(q, Vector3::new(tx, ty, tz))
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Exponential map from a twist to a pose.
    pub fn exp(twist: &Twist) -> Pose {
        let omega = twist.rotation;
        let theta = omega.norm();
        let rotation = UnitQuaternion::from_scaled_axis(omega);
        let v = left_jacobian(&omega, theta);
        Pose {
            rotation,
            translation: v * twist.translation,
        }
    }

    /// Logarithm map; errors when the rotation angle is within 1e-6 of pi.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        let angle = self.rotation.angle();
        if angle > std::f64::consts::PI - 1e-6 {
            return Err(GeometryError::NearSingularRotation { angle });
        }
        let omega = self.rotation.scaled_axis();
        let v_inv = left_jacobian_inverse(&omega, angle);
        Ok(Twist {
            rotation: omega,
            translation: v_inv * self.translation,
        })
    }
}

/// Element of se(3): rotation part first, translation second.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    /// Packs as `(rx, ry, rz, tx, ty, tz)`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.translation[0],
            self.translation[1],
            self.translation[2],
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn scale(&self, s: f64) -> Twist {
        Twist {
            rotation: self.rotation * s,
            translation: self.translation * s,
        }
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Left Jacobian of SO(3), the V matrix coupling rotation into translation.
fn left_jacobian(omega: &Vector3<f64>, theta: f64) -> Matrix3<f64> {
    let k = skew(omega);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k * 0.5 + k * k / 6.0;
    }
    let t2 = theta * theta;
    let a = (1.0 - theta.cos()) / t2;
    let b = (theta - theta.sin()) / (t2 * theta);
    Matrix3::identity() + k * a + k * k * b
}

fn left_jacobian_inverse(omega: &Vector3<f64>, theta: f64) -> Matrix3<f64> {
    let k = skew(omega);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() - k * 0.5 + k * k / 12.0;
    }
    let t2 = theta * theta;
    let half = 0.5 * theta;
    let b = (1.0 - half * half.cos() / half.sin()) / t2;
    Matrix3::identity() - k * 0.5 + k * k * b
}

/// Pinhole camera with a valid depth range in meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near: 0.05,
            far: 20.0,
        }
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64), GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::BehindCamera { z: p.z });
        }
        Ok((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Lifts pixel `(u, v)` at camera-frame depth `d` back to a 3D point.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if !depth.is_finite() || depth <= 0.0 {
            return Err(GeometryError::InvalidDepth { depth });
        }
        Ok(Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Timestamped camera-to-world trajectory.
pub type Trajectory = Vec<(f64, Pose)>;

/// Parses TUM-format trajectory text: `timestamp tx ty tz qx qy qz qw`.
/// Lines starting with `#` and blank lines are skipped.
pub fn parse_trajectory(text: &str) -> Result<Trajectory, GeometryError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(GeometryError::MalformedTrajectory {
                line: idx + 1,
                reason: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 8];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.parse().map_err(|_| GeometryError::MalformedTrajectory {
                line: idx + 1,
                reason: format!("field {:?} is not a number", f),
            })?;
        }
        let pose = Pose::from_parts(vals[1], vals[2], vals[3], vals[7], vals[4], vals[5], vals[6]);
        out.push((vals[0], pose));
    }
    Ok(out)
}

pub fn format_trajectory(traj: &[(f64, Pose)]) -> String {
    let mut s = String::new();
    s.push_str("# timestamp tx ty tz qx qy qz qw\n");
    for (t, pose) in traj {
        let q = pose.rotation.quaternion();
        let p = pose.translation;
        let _ = writeln!(
            s,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            t, p.x, p.y, p.z, q.i, q.j, q.k, q.w
        );
    }
    s
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, GeometryError> {
    let text = std::fs::read_to_string(path).map_err(|e| GeometryError::Io(e.to_string()))?;
    parse_trajectory(&text)
}

pub fn write_trajectory(path: &Path, traj: &[(f64, Pose)]) -> Result<(), GeometryError> {
    std::fs::write(path, format_trajectory(traj)).map_err(|e| GeometryError::Io(e.to_string()))
}
