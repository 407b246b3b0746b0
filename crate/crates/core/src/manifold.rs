//! Geometry of the pose manifold R^3 x S^3 and of the low-dimensional
//! Euclidean toy spaces embedded in it.
//!
//! Poses carry a position and a unit quaternion in (w, x, y, z) order with the
//! sign canonicalized to w >= 0. Tangent vectors split into independent linear
//! and angular parts; angular coordinates are rotation-vector (log) coordinates
//! expressed in world axes, so transforming a tangent into another frame
//! rotates both parts by the frame orientation and integration applies the
//! angular update on the left: `q <- exp(w * dt) * q`.

use alloc::string::String;
use alloc::vec::Vec;

// Resolves f64 math in no_std builds; redundant (and lint-flagged) when a
// dependency feature pulls std into the crate graph.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Tolerance under which a squared quaternion norm is considered exactly one
/// and renormalization is skipped. Keeps repeated canonicalization idempotent.
const UNIT_NORM_SQ_TOL: f64 = 1e-14;

/// Unit quaternion, scalar part first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        Quat { w, x, y, z }.normalized()
    }

    /// Renormalizes (lazily) and canonicalizes the sign so that w >= 0.
    pub fn normalized(self) -> Quat {
        let n2 = self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z;
        let q = if (n2 - 1.0).abs() > UNIT_NORM_SQ_TOL {
            let inv = 1.0 / n2.sqrt();
            Quat {
                w: self.w * inv,
                x: self.x * inv,
                y: self.y * inv,
                z: self.z * inv,
            }
        } else {
            self
        };
        if q.w < 0.0 {
            Quat {
                w: -q.w,
                x: -q.x,
                y: -q.y,
                z: -q.z,
            }
        } else {
            q
        }
    }

    pub fn conjugate(self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(self, other: Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Hamilton product. The result is not normalized; callers that need a
    /// canonical unit quaternion go through [`Quat::normalized`].
    pub fn mul(self, rhs: Quat) -> Quat {
        Quat {
            w: self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            x: self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            y: self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            z: self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        }
    }

    /// Rotates a vector: q v q^-1.
    pub fn rotate(self, v: [f64; 3]) -> [f64; 3] {
        let qv = [self.x, self.y, self.z];
        let t = scale3(cross(qv, v), 2.0);
        add3(v, add3(scale3(t, self.w), cross(qv, t)))
    }

    /// Exponential of a rotation vector.
    pub fn exp(v: [f64; 3]) -> Quat {
        let theta = norm3(v);
        if theta < 1e-12 {
            return Quat {
                w: 1.0,
                x: 0.5 * v[0],
                y: 0.5 * v[1],
                z: 0.5 * v[2],
            }
            .normalized();
        }
        let half = 0.5 * theta;
        let s = half.sin() / theta;
        Quat {
            w: half.cos(),
            x: v[0] * s,
            y: v[1] * s,
            z: v[2] * s,
        }
        .normalized()
    }

    /// Rotation vector of the shorter arc to this rotation.
    ///
    /// Errors with [`Error::GeodesicUndefined`] at the antipode (rotation
    /// angle pi), where the axis is ambiguous.
    pub fn log(self) -> Result<[f64; 3]> {
        let q = if self.w < 0.0 {
            Quat {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        };
        let nv = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if nv < 1e-12 {
            // Small angle: theta/sin(theta/2) -> 2.
            return Ok([2.0 * q.x, 2.0 * q.y, 2.0 * q.z]);
        }
        if q.w < 1e-12 {
            return Err(Error::GeodesicUndefined);
        }
        let theta = 2.0 * nv.atan2(q.w);
        let s = theta / nv;
        Ok([q.x * s, q.y * s, q.z * s])
    }

    /// Quaternion for the rotation whose columns are the given orthonormal
    /// basis vectors (Shepperd's method).
    pub fn from_basis(x: [f64; 3], y: [f64; 3], z: [f64; 3]) -> Quat {
        // Row-major rotation matrix with columns x, y, z.
        let m = [
            [x[0], y[0], z[0]],
            [x[1], y[1], z[1]],
            [x[2], y[2], z[2]],
        ];
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m[2][1] - m[1][2]) / s,
                y: (m[0][2] - m[2][0]) / s,
                z: (m[1][0] - m[0][1]) / s,
            }
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quat {
                w: (m[2][1] - m[1][2]) / s,
                x: 0.25 * s,
                y: (m[0][1] + m[1][0]) / s,
                z: (m[0][2] + m[2][0]) / s,
            }
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quat {
                w: (m[0][2] - m[2][0]) / s,
                x: (m[0][1] + m[1][0]) / s,
                y: 0.25 * s,
                z: (m[1][2] + m[2][1]) / s,
            }
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quat {
                w: (m[1][0] - m[0][1]) / s,
                x: (m[0][2] + m[2][0]) / s,
                y: (m[1][2] + m[2][1]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized()
    }

    /// Rotation angle (radians, in [0, pi]) between two rotations.
    pub fn angle_to(self, other: Quat) -> f64 {
        let d = self.dot(other).abs().min(1.0);
        2.0 * d.acos()
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// End-effector or object pose: position plus unit quaternion.
///
/// Serializes as the 7-scalar array `[x, y, z, w, qx, qy, qz]` in every file
/// format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: Quat,
}

#[cfg(feature = "serde")]
impl serde::Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        let q = self.orientation;
        let coords: [f64; 7] = [
            self.position[0],
            self.position[1],
            self.position[2],
            q.w,
            q.x,
            q.y,
            q.z,
        ];
        coords.serialize(serializer)
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        let c = <[f64; 7]>::deserialize(deserializer)?;
        Ok(Pose::new(
            [c[0], c[1], c[2]],
            Quat {
                w: c[3],
                x: c[4],
                y: c[5],
                z: c[6],
            },
        ))
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        position: [0.0; 3],
        orientation: Quat::IDENTITY,
    };

    pub fn new(position: [f64; 3], orientation: Quat) -> Pose {
        Pose {
            position,
            orientation: orientation.normalized(),
        }
    }

    pub fn from_xy(x: f64, y: f64) -> Pose {
        Pose {
            position: [x, y, 0.0],
            orientation: Quat::IDENTITY,
        }
    }

    /// Pose with the given position and a yaw rotation about world z.
    pub fn from_xy_yaw(x: f64, y: f64, yaw: f64) -> Pose {
        Pose {
            position: [x, y, 0.0],
            orientation: Quat::exp([0.0, 0.0, yaw]),
        }
    }

    pub fn inverse(self) -> Pose {
        let q = self.orientation.conjugate().normalized();
        Pose {
            position: scale3(q.rotate(self.position), -1.0),
            orientation: q,
        }
    }

    pub fn is_finite(self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.orientation.is_finite()
    }
}

/// Velocity or displacement on the pose manifold. Linear and angular parts do
/// not couple; the angular part is a world-axis rotation vector (rate).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tangent {
    pub linear: [f64; 3],
    pub angular: [f64; 3],
}

impl Tangent {
    pub fn zero() -> Tangent {
        Tangent::default()
    }

    pub fn scaled(self, s: f64) -> Tangent {
        Tangent {
            linear: scale3(self.linear, s),
            angular: scale3(self.angular, s),
        }
    }

    pub fn add(self, other: Tangent) -> Tangent {
        Tangent {
            linear: add3(self.linear, other.linear),
            angular: add3(self.angular, other.angular),
        }
    }

    pub fn as_array(self) -> [f64; 6] {
        [
            self.linear[0],
            self.linear[1],
            self.linear[2],
            self.angular[0],
            self.angular[1],
            self.angular[2],
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Tangent {
        Tangent {
            linear: [a[0], a[1], a[2]],
            angular: [a[3], a[4], a[5]],
        }
    }

    pub fn is_finite(self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// A local coordinate frame: a labelled pose in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pose: Pose,
    pub id: String,
}

impl Frame {
    pub fn new(id: impl Into<String>, pose: Pose) -> Frame {
        Frame {
            pose,
            id: id.into(),
        }
    }

    pub fn identity(id: impl Into<String>) -> Frame {
        Frame::new(id, Pose::IDENTITY)
    }
}

/// Group composition: apply `b` in the coordinates of `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        position: add3(a.position, a.orientation.rotate(b.position)),
        orientation: a.orientation.mul(b.orientation).normalized(),
    }
}

/// Expresses a world pose in the local frame `f`:
/// `[q_f^-1 (x - x_f) q_f, q_f^-1 q]`.
pub fn to_local(ee: &Pose, f: &Frame) -> Pose {
    let qf_inv = f.pose.orientation.conjugate();
    Pose {
        position: qf_inv.rotate(sub3(ee.position, f.pose.position)),
        orientation: qf_inv.mul(ee.orientation).normalized(),
    }
}

/// Inverse of [`to_local`]: reconstructs the world pose.
pub fn to_global(local: &Pose, f: &Frame) -> Pose {
    Pose {
        position: add3(f.pose.position, f.pose.orientation.rotate(local.position)),
        orientation: f.pose.orientation.mul(local.orientation).normalized(),
    }
}

/// Rotates a tangent vector from frame `f` into the world frame. Both parts
/// rotate by the frame orientation; norms are preserved.
pub fn transform_tangent(v: &Tangent, f: &Frame) -> Tangent {
    Tangent {
        linear: f.pose.orientation.rotate(v.linear),
        angular: f.pose.orientation.rotate(v.angular),
    }
}

/// Rotates a tangent vector from the world frame into frame `f`.
pub fn transform_tangent_into(v: &Tangent, f: &Frame) -> Tangent {
    let q = f.pose.orientation.conjugate();
    Tangent {
        linear: q.rotate(v.linear),
        angular: q.rotate(v.angular),
    }
}

/// Spherical linear interpolation along the shorter arc.
pub fn slerp(a: Quat, b: Quat, t: f64) -> Result<Quat> {
    let d = a.dot(b);
    let b = if d < 0.0 {
        Quat {
            w: -b.w,
            x: -b.x,
            y: -b.y,
            z: -b.z,
        }
    } else {
        b
    };
    let ad = d.abs();
    if ad < 1e-12 {
        return Err(Error::GeodesicUndefined);
    }
    if ad > 1.0 - 1e-12 {
        // Nearly identical: linear blend, renormalized.
        return Ok(Quat {
            w: (1.0 - t) * a.w + t * b.w,
            x: (1.0 - t) * a.x + t * b.x,
            y: (1.0 - t) * a.y + t * b.y,
            z: (1.0 - t) * a.z + t * b.z,
        }
        .normalized());
    }
    let omega = ad.min(1.0).acos();
    let sin_omega = omega.sin();
    let wa = ((1.0 - t) * omega).sin() / sin_omega;
    let wb = (t * omega).sin() / sin_omega;
    Ok(Quat {
        w: wa * a.w + wb * b.w,
        x: wa * a.x + wb * b.x,
        y: wa * a.y + wb * b.y,
        z: wa * a.z + wb * b.z,
    }
    .normalized())
}

/// Geodesic between two poses: positions interpolate linearly, orientations
/// slerp along the shorter arc.
pub fn geodesic_interpolate(a: &Pose, b: &Pose, t: f64) -> Result<Pose> {
    Ok(Pose {
        position: [
            (1.0 - t) * a.position[0] + t * b.position[0],
            (1.0 - t) * a.position[1] + t * b.position[1],
            (1.0 - t) * a.position[2] + t * b.position[2],
        ],
        orientation: slerp(a.orientation, b.orientation, t)?,
    })
}

/// One-shot weighted geodesic mean.
///
/// Positions combine by a per-dimension weighted sum. Orientations combine by
/// a sign-aligned weighted quaternion sum followed by renormalization, with
/// each pose's scalar orientation weight taken as the mean of its three
/// angular weights. Exact for collinear quaternions, first-order accurate
/// otherwise; the streams feeding this are mutually close by construction.
///
/// `weights[f]` holds six per-dimension weights (three linear, three angular)
/// that the caller has normalized to sum to one across poses per dimension.
pub fn weighted_geodesic_mean(poses: &[Pose], weights: &[[f64; 6]]) -> Result<Pose> {
    if poses.is_empty() {
        return Err(Error::Empty("weighted_geodesic_mean: no poses"));
    }
    if poses.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            what: "weighted_geodesic_mean weights",
            expected: poses.len(),
            got: weights.len(),
        });
    }
    let total: f64 = weights
        .iter()
        .map(|w| w.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    if total == 0.0 {
        return Err(Error::DegenerateWeights);
    }

    let mut position = [0.0; 3];
    for (pose, w) in poses.iter().zip(weights) {
        for d in 0..3 {
            position[d] += w[d] * pose.position[d];
        }
    }

    let reference = poses[0].orientation;
    let mut acc = Quat {
        w: 0.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };
    let mut rot_total = 0.0;
    for (pose, w) in poses.iter().zip(weights) {
        let s = (w[3] + w[4] + w[5]) / 3.0;
        rot_total += s;
        let q = if reference.dot(pose.orientation) < 0.0 {
            Quat {
                w: -pose.orientation.w,
                x: -pose.orientation.x,
                y: -pose.orientation.y,
                z: -pose.orientation.z,
            }
        } else {
            pose.orientation
        };
        acc.w += s * q.w;
        acc.x += s * q.x;
        acc.y += s * q.y;
        acc.z += s * q.z;
    }
    let orientation = if rot_total.abs() < 1e-12 {
        // Angular group carries no weight; fall back to a uniform blend.
        let s = 1.0 / poses.len() as f64;
        let mut acc = Quat {
            w: 0.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        };
        for pose in poses {
            let q = if reference.dot(pose.orientation) < 0.0 {
                Quat {
                    w: -pose.orientation.w,
                    x: -pose.orientation.x,
                    y: -pose.orientation.y,
                    z: -pose.orientation.z,
                }
            } else {
                pose.orientation
            };
            acc.w += s * q.w;
            acc.x += s * q.x;
            acc.y += s * q.y;
            acc.z += s * q.z;
        }
        acc.normalized()
    } else {
        acc.normalized()
    };
    Ok(Pose {
        position,
        orientation,
    })
}

/// Rotation vector carrying `q_from` to `q_to` by left multiplication:
/// `q_to = exp(w) * q_from`.
pub fn log_map(q_from: Quat, q_to: Quat) -> Result<[f64; 3]> {
    q_to.mul(q_from.conjugate()).normalized().log()
}

/// Left-applied exponential update: `exp(w) * q`.
pub fn exp_map(q: Quat, w: [f64; 3]) -> Quat {
    Quat::exp(w).mul(q).normalized()
}

/// Diagonal of `R diag(var) R^T` for the rotation `q`: how a diagonal
/// covariance block transports between frames once off-diagonal terms are
/// dropped.
pub fn rotate_diag_covariance(q: Quat, var: [f64; 3]) -> [f64; 3] {
    let r = rotation_matrix(q);
    let mut out = [0.0; 3];
    for (i, row) in r.iter().enumerate() {
        for (j, &v) in var.iter().enumerate() {
            out[i] += row[j] * row[j] * v;
        }
    }
    out
}

/// Row-major rotation matrix of a unit quaternion.
pub fn rotation_matrix(q: Quat) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// State space a flow model operates on. Euclidean states of dimension
/// `d <= 3` are embedded in the pose manifold as positions with z padded to
/// zero and identity orientation, so frame transforms and integration share
/// one code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StateSpace {
    Euclidean(usize),
    PoseManifold,
}

impl StateSpace {
    pub fn validate(&self) -> Result<()> {
        match self {
            StateSpace::Euclidean(d) if *d == 0 || *d > 3 => Err(Error::InvalidConfig(
                alloc::format!("euclidean state dimension {d} not in 1..=3"),
            )),
            _ => Ok(()),
        }
    }

    /// Number of scalars fed to / produced by a network for a state.
    pub fn coord_dim(&self) -> usize {
        match self {
            StateSpace::Euclidean(d) => *d,
            StateSpace::PoseManifold => 7,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            StateSpace::Euclidean(d) => *d,
            StateSpace::PoseManifold => 6,
        }
    }

    /// (linear dims, angular dims) of the tangent space.
    pub fn group_dims(&self) -> (usize, usize) {
        match self {
            StateSpace::Euclidean(d) => (*d, 0),
            StateSpace::PoseManifold => (3, 3),
        }
    }

    /// Number of dimension groups (position, and orientation when present).
    pub fn group_count(&self) -> usize {
        match self {
            StateSpace::Euclidean(_) => 1,
            StateSpace::PoseManifold => 2,
        }
    }

    pub fn coords(&self, p: &Pose) -> Vec<f64> {
        match self {
            StateSpace::Euclidean(d) => p.position[..*d].to_vec(),
            StateSpace::PoseManifold => {
                let q = p.orientation;
                alloc::vec![
                    p.position[0],
                    p.position[1],
                    p.position[2],
                    q.w,
                    q.x,
                    q.y,
                    q.z
                ]
            }
        }
    }

    pub fn from_coords(&self, coords: &[f64]) -> Result<Pose> {
        if coords.len() != self.coord_dim() {
            return Err(Error::DimensionMismatch {
                what: "state coordinates",
                expected: self.coord_dim(),
                got: coords.len(),
            });
        }
        match self {
            StateSpace::Euclidean(d) => {
                let mut position = [0.0; 3];
                position[..*d].copy_from_slice(coords);
                Ok(Pose {
                    position,
                    orientation: Quat::IDENTITY,
                })
            }
            StateSpace::PoseManifold => Ok(Pose::new(
                [coords[0], coords[1], coords[2]],
                Quat {
                    w: coords[3],
                    x: coords[4],
                    y: coords[5],
                    z: coords[6],
                },
            )),
        }
    }

    /// Constant-velocity displacement from `from` to `to`.
    pub fn log(&self, from: &Pose, to: &Pose) -> Result<Tangent> {
        let linear = sub3(to.position, from.position);
        let angular = match self {
            StateSpace::Euclidean(_) => [0.0; 3],
            StateSpace::PoseManifold => log_map(from.orientation, to.orientation)?,
        };
        Ok(Tangent { linear, angular })
    }

    /// Explicit Euler step: position moves additively, orientation by the
    /// left-applied exponential. Quaternions stay canonical.
    pub fn step(&self, p: &Pose, v: &Tangent, dt: f64) -> Pose {
        let position = [
            p.position[0] + v.linear[0] * dt,
            p.position[1] + v.linear[1] * dt,
            p.position[2] + v.linear[2] * dt,
        ];
        let orientation = match self {
            StateSpace::Euclidean(_) => p.orientation,
            StateSpace::PoseManifold => exp_map(p.orientation, scale3(v.angular, dt)),
        };
        Pose {
            position,
            orientation,
        }
    }

    pub fn interpolate(&self, a: &Pose, b: &Pose, t: f64) -> Result<Pose> {
        geodesic_interpolate(a, b, t)
    }

    /// Network velocity head output, widened to a full tangent vector.
    pub fn tangent_from_slice(&self, out: &[f64]) -> Result<Tangent> {
        if out.len() != self.tangent_dim() {
            return Err(Error::DimensionMismatch {
                what: "velocity output",
                expected: self.tangent_dim(),
                got: out.len(),
            });
        }
        match self {
            StateSpace::Euclidean(d) => {
                let mut linear = [0.0; 3];
                linear[..*d].copy_from_slice(out);
                Ok(Tangent {
                    linear,
                    angular: [0.0; 3],
                })
            }
            StateSpace::PoseManifold => Ok(Tangent {
                linear: [out[0], out[1], out[2]],
                angular: [out[3], out[4], out[5]],
            }),
        }
    }

    pub fn tangent_to_vec(&self, v: &Tangent) -> Vec<f64> {
        match self {
            StateSpace::Euclidean(d) => v.linear[..*d].to_vec(),
            StateSpace::PoseManifold => v.as_array().to_vec(),
        }
    }

    /// Gaussian draw in the tangent space about `base`, applied in the base
    /// pose's own axes so that draws transform equivariantly with the scene
    /// (the law is isotropic, so the distribution is the same either way).
    /// Only the dimensions of this space are perturbed; draw order is fixed
    /// (linear then angular) for reproducibility.
    pub fn sample_about<R: Rng + ?Sized>(
        &self,
        base: &Pose,
        sigma_pos: f64,
        sigma_rot: f64,
        rng: &mut R,
    ) -> Pose {
        let (lin_dims, ang_dims) = self.group_dims();
        let mut offset = [0.0; 3];
        for o in offset.iter_mut().take(lin_dims) {
            let n: f64 = StandardNormal.sample(rng);
            *o = sigma_pos * n;
        }
        let position = add3(base.position, base.orientation.rotate(offset));
        let orientation = if ang_dims > 0 {
            let mut w = [0.0; 3];
            for wi in w.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *wi = sigma_rot * n;
            }
            base.orientation.mul(Quat::exp(w)).normalized()
        } else {
            base.orientation
        };
        Pose {
            position,
            orientation,
        }
    }

    /// Squared tangent distance between two states.
    pub fn distance_sq(&self, a: &Pose, b: &Pose) -> Result<f64> {
        let t = self.log(a, b)?;
        Ok(t.as_array().iter().map(|v| v * v).sum())
    }
}

/// Componentwise vector helpers used throughout the crate.
pub fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn approx3(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| approx(*x, *y, tol))
    }

    use crate::testutil::{random_pose, random_quat};

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let left = compose(&Pose::IDENTITY, &p);
            assert!(approx3(left.position, p.position, 1e-12));
            assert!(approx(left.orientation.dot(p.orientation).abs(), 1.0, 1e-12));

            let round = compose(&p, &p.inverse());
            assert!(approx3(round.position, [0.0; 3], 1e-9));
            assert!(approx(round.orientation.w, 1.0, 1e-9));
        }
    }

    #[test]
    fn compose_matches_rotation_matrix_oracle() {
        // (rot 90 deg about z at origin) o (translate (1,0,0)).
        let a = Pose::from_xy_yaw(0.0, 0.0, FRAC_PI_2);
        let b = Pose::from_xy(1.0, 0.0);
        let c = compose(&a, &b);
        // Oracle: multiply through the rotation matrix.
        let r = rotation_matrix(a.orientation);
        let expect = [r[0][0], r[1][0], r[2][0]];
        assert!(approx3(c.position, expect, 1e-12));
        assert!(approx3(c.position, [0.0, 1.0, 0.0], 1e-12));
        assert!(approx(c.orientation.angle_to(a.orientation), 0.0, 1e-12));
    }

    #[test]
    fn to_local_identity_and_translation() {
        let p = Pose::new([1.0, 2.0, 3.0], Quat::exp([0.1, 0.2, 0.3]));
        let f = Frame::identity("f");
        let l = to_local(&p, &f);
        assert_eq!(l.position, p.position);

        let f = Frame::new("f", Pose::from_xy(1.0, 0.0));
        let ee = Pose::new([1.0, 2.0, 3.0], Quat::IDENTITY);
        let l = to_local(&ee, &f);
        assert!(approx3(l.position, [0.0, 2.0, 3.0], 1e-12));
    }

    #[test]
    fn to_local_rotation_oracle() {
        let f = Frame::new("f", Pose::from_xy_yaw(0.0, 0.0, FRAC_PI_2));
        let ee = Pose::new([1.0, 0.0, 0.0], Quat::IDENTITY);
        let l = to_local(&ee, &f);
        assert!(approx3(l.position, [0.0, -1.0, 0.0], 1e-12));
        // Orientation equals the inverse of the frame quaternion.
        let expect = f.pose.orientation.conjugate().normalized();
        assert!(approx(l.orientation.dot(expect).abs(), 1.0, 1e-12));

        let g = to_global(&Pose::new([0.0, -1.0, 0.0], Quat::IDENTITY), &f);
        assert!(approx3(g.position, [1.0, 0.0, 0.0], 1e-12));
    }

    #[test]
    fn local_global_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut max_pos: f64 = 0.0;
        let mut max_rot: f64 = 0.0;
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let f = Frame::new("f", random_pose(&mut rng));
            let back = to_global(&to_local(&p, &f), &f);
            for d in 0..3 {
                max_pos = max_pos.max((back.position[d] - p.position[d]).abs());
            }
            max_rot = max_rot.max(1.0 - back.orientation.dot(p.orientation).abs());
        }
        assert!(max_pos < 1e-9, "max position error {max_pos}");
        assert!(max_rot < 1e-9, "max orientation error {max_rot}");
    }

    #[test]
    fn tangent_transform_norm_and_oracle() {
        let f = Frame::new("f", Pose::from_xy_yaw(0.0, 0.0, FRAC_PI_2));
        let v = Tangent {
            linear: [1.0, 0.0, 0.0],
            angular: [0.0, 0.0, 0.0],
        };
        let w = transform_tangent(&v, &f);
        assert!(approx3(w.linear, [0.0, 1.0, 0.0], 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let f = Frame::new("f", random_pose(&mut rng));
            let v = Tangent {
                linear: [rng.random(), rng.random(), rng.random()],
                angular: [rng.random(), rng.random(), rng.random()],
            };
            let w = transform_tangent(&v, &f);
            assert!(approx(norm3(w.linear), norm3(v.linear), 1e-12));
            assert!(approx(norm3(w.angular), norm3(v.angular), 1e-12));
            let back = transform_tangent_into(&w, &f);
            assert!(approx3(back.linear, v.linear, 1e-12));
            assert!(approx3(back.angular, v.angular, 1e-12));
        }

        let id = Frame::identity("id");
        let w = transform_tangent(&v, &id);
        assert_eq!(w.linear, v.linear);
        assert_eq!(w.angular, v.angular);
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let a = Pose::IDENTITY;
        let b = Pose::from_xy_yaw(0.0, 0.0, FRAC_PI_2);
        let p0 = geodesic_interpolate(&a, &b, 0.0).unwrap();
        assert_eq!(p0, a);
        let p1 = geodesic_interpolate(&a, &b, 1.0).unwrap();
        assert_eq!(p1, b);
        let mid = geodesic_interpolate(&a, &b, 0.5).unwrap();
        let expect = Quat::exp([0.0, 0.0, FRAC_PI_4]);
        assert!(approx(mid.orientation.dot(expect).abs(), 1.0, 1e-12));
    }

    #[test]
    fn slerp_antipodal_errors() {
        let a = Quat::IDENTITY;
        let b = Quat::exp([PI, 0.0, 0.0]);
        assert_eq!(slerp(a, b, 0.5), Err(Error::GeodesicUndefined));
    }

    #[test]
    fn weighted_mean_cases() {
        let p = Pose::new([0.5, -1.0, 2.0], Quat::exp([0.3, 0.0, 0.1]));
        let one = weighted_geodesic_mean(&[p], &[[1.0; 6]]).unwrap();
        assert_eq!(one, p);

        let two = weighted_geodesic_mean(&[p, p], &[[0.3; 6], [0.7; 6]]).unwrap();
        assert!(approx3(two.position, p.position, 1e-12));
        assert!(approx(two.orientation.dot(p.orientation).abs(), 1.0, 1e-12));

        let a = Pose::from_xy(0.0, 0.0);
        let b = Pose::from_xy(2.0, 0.0);
        let m = weighted_geodesic_mean(&[a, b], &[[0.25; 6], [0.75; 6]]).unwrap();
        assert!(approx3(m.position, [1.5, 0.0, 0.0], 1e-12));

        assert_eq!(
            weighted_geodesic_mean(&[a, b], &[[0.0; 6], [0.0; 6]]),
            Err(Error::DegenerateWeights)
        );
    }

    #[test]
    fn log_exp_round_trip() {
        assert_eq!(log_map(Quat::IDENTITY, Quat::IDENTITY).unwrap(), [0.0; 3]);

        let ninety_z = exp_map(Quat::IDENTITY, [0.0, 0.0, FRAC_PI_2]);
        let expect = Quat::exp([0.0, 0.0, FRAC_PI_2]);
        assert!(approx(ninety_z.dot(expect).abs(), 1.0, 1e-12));
        assert!(approx(ninety_z.w, FRAC_PI_4.cos(), 1e-12));
        assert!(approx(ninety_z.z, FRAC_PI_4.sin(), 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let a = random_quat(&mut rng);
            let b = random_quat(&mut rng);
            let w = log_map(a, b).unwrap();
            let back = exp_map(a, w);
            max_err = max_err.max(1.0 - back.dot(b).abs());
        }
        assert!(max_err < 1e-9, "round trip error {max_err}");
    }

    #[test]
    fn log_antipodal_errors() {
        let a = Quat::IDENTITY;
        let b = Quat::exp([0.0, PI, 0.0]);
        assert_eq!(log_map(a, b), Err(Error::GeodesicUndefined));
    }

    #[test]
    fn interpolation_is_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let g = Frame::new("g", random_pose(&mut rng));
            let t = rng.random::<f64>();
            if let (Ok(before), Ok(after)) = (
                geodesic_interpolate(&a, &b, t).map(|p| to_global(&p, &g)),
                geodesic_interpolate(&to_global(&a, &g), &to_global(&b, &g), t),
            ) {
                assert!(approx3(before.position, after.position, 1e-9));
                assert!(approx(before.orientation.dot(after.orientation).abs(), 1.0, 1e-9));
            }
        }
    }

    #[test]
    fn rotate_diag_covariance_permutes_under_quarter_turn() {
        let q = Quat::exp([0.0, 0.0, FRAC_PI_2]);
        let v = rotate_diag_covariance(q, [1.0, 4.0, 1.0]);
        assert!(approx3(v, [4.0, 1.0, 1.0], 1e-9));

        // Isotropic variance is invariant under any rotation.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let v = rotate_diag_covariance(q, [0.7, 0.7, 0.7]);
            assert!(approx3(v, [0.7, 0.7, 0.7], 1e-9));
        }
    }

    #[test]
    fn euclidean_embedding() {
        let s = StateSpace::Euclidean(2);
        let p = s.from_coords(&[1.5, -0.5]).unwrap();
        assert_eq!(p.position, [1.5, -0.5, 0.0]);
        assert_eq!(s.coords(&p), alloc::vec![1.5, -0.5]);
        let v = s
            .tangent_from_slice(&[2.0, 1.0])
            .unwrap();
        let q = s.step(&p, &v, 0.5);
        assert_eq!(q.position, [2.5, 0.0, 0.0]);
        assert_eq!(q.orientation, Quat::IDENTITY);
    }

    #[test]
    fn pose_coords_round_trip() {
        let s = StateSpace::PoseManifold;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let back = s.from_coords(&s.coords(&p)).unwrap();
            assert!(approx3(back.position, p.position, 1e-12));
            assert!(approx(back.orientation.dot(p.orientation).abs(), 1.0, 1e-12));
        }
    }

    #[test]
    fn constant_field_integration_is_exact() {
        let s = StateSpace::PoseManifold;
        let z0 = Pose::IDENTITY;
        let v = Tangent {
            linear: [1.0, 0.0, 0.0],
            angular: [0.0, 0.0, 1.2],
        };
        let mut z = z0;
        for _ in 0..10 {
            z = s.step(&z, &v, 0.1);
        }
        assert!(approx3(z.position, [1.0, 0.0, 0.0], 1e-12));
        let expect = Quat::exp([0.0, 0.0, 1.2]);
        assert!(approx(z.orientation.dot(expect).abs(), 1.0, 1e-12));
    }
}
