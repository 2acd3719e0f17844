//! Canonical camera trajectories and landmark-based pose refinement.
//!
//! Eight motion archetypes are supported; each maps a scalar progress
//! `s_t = t / (T - 1)` to a rigid pose, starting exactly at the caller's
//! initial pose. Zoom translates along the camera's forward axis, turn
//! and look rotate in place about the camera's own vertical/horizontal
//! axis, and orbit rotates the whole camera rigidly about an axis through
//! the pivot so both the orbit radius and the pivot's image position stay
//! constant.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix6, Rotation3, Unit, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, GeometryError, Intrinsics, Pose};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid trajectory parameters: {what}")]
    InvalidParams { what: &'static str },
    #[error("orbit is degenerate: camera center coincides with the pivot")]
    DegenerateOrbit,
    #[error("pose refinement needs at least 3 landmarks (got {got})")]
    InsufficientLandmarks { got: usize },
    #[error("normal equations are singular (conditioning {conditioning:.3e})")]
    SingularNormalEquations { conditioning: f64 },
    #[error("unknown motion label: {0:?}")]
    UnknownMotion(String),
    #[error("malformed trajectory file: {0}")]
    MalformedTrajectory(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

/// The eight canonical camera motions, in their fixed class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionType {
    ZoomIn,
    ZoomOut,
    TurnLeft,
    TurnRight,
    Orbit,
    Stationary,
    LookUp,
    LookDown,
}

impl MotionType {
    pub const ALL: [MotionType; 8] = [
        MotionType::ZoomIn,
        MotionType::ZoomOut,
        MotionType::TurnLeft,
        MotionType::TurnRight,
        MotionType::Orbit,
        MotionType::Stationary,
        MotionType::LookUp,
        MotionType::LookDown,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MotionType::ZoomIn => "zoom-in",
            MotionType::ZoomOut => "zoom-out",
            MotionType::TurnLeft => "turn-left",
            MotionType::TurnRight => "turn-right",
            MotionType::Orbit => "orbit",
            MotionType::Stationary => "stationary",
            MotionType::LookUp => "look-up",
            MotionType::LookDown => "look-down",
        }
    }

    /// Class index used by the motion classifier head.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }

    pub fn from_index(index: usize) -> Option<MotionType> {
        Self::ALL.get(index).copied()
    }

    /// Default motion magnitude: meters for zooms, radians otherwise.
    pub fn default_magnitude(self) -> f64 {
        match self {
            MotionType::ZoomIn | MotionType::ZoomOut => 1.0,
            MotionType::TurnLeft | MotionType::TurnRight => 0.5,
            MotionType::LookUp | MotionType::LookDown => 0.5,
            MotionType::Orbit => std::f64::consts::TAU,
            MotionType::Stationary => 0.0,
        }
    }
}

impl fmt::Display for MotionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MotionType {
    type Err = TrajectoryError;

    /// Accepts the canonical labels case-insensitively, with `-`, `_`,
    /// or space as the separator. Anything else is rejected.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| match c {
                '_' | ' ' => '-',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        MotionType::ALL
            .into_iter()
            .find(|m| m.label() == norm)
            .ok_or_else(|| TrajectoryError::UnknownMotion(s.to_string()))
    }
}

impl Serialize for MotionType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for MotionType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inputs shared by every motion archetype.
#[derive(Debug, Clone)]
pub struct TrajectoryParams {
    /// Number of poses to generate, `T >= 1`.
    pub frame_count: usize,
    pub initial_pose: Pose,
    /// Scene point the orbit circles and the turn/look motions keep in
    /// mind only implicitly (they rotate in place).
    pub pivot: Vector3<f64>,
    /// Motion magnitude; `None` selects the per-motion default.
    pub magnitude: Option<f64>,
}

impl TrajectoryParams {
    pub fn new(frame_count: usize, initial_pose: Pose, pivot: Vector3<f64>) -> Self {
        Self {
            frame_count,
            initial_pose,
            pivot,
            magnitude: None,
        }
    }

    pub fn with_magnitude(mut self, magnitude: f64) -> Self {
        self.magnitude = Some(magnitude);
        self
    }
}

fn rotation_about(axis: &Unit<Vector3<f64>>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(axis, angle).into_inner()
}

/// Generates `T` world-to-camera poses for one canonical motion.
///
/// `poses[0]` is the initial pose verbatim. Progress is uniform in time;
/// with `T = 1` only the initial pose is returned.
pub fn generate_trajectory(motion: MotionType, params: &TrajectoryParams) -> Result<Vec<Pose>> {
    let t_count = params.frame_count;
    if t_count == 0 {
        return Err(TrajectoryError::InvalidParams {
            what: "frame count must be at least 1",
        });
    }
    let magnitude = params.magnitude.unwrap_or(motion.default_magnitude());
    if !magnitude.is_finite() {
        return Err(TrajectoryError::InvalidParams {
            what: "magnitude must be finite",
        });
    }
    if !params.pivot.iter().all(|v| v.is_finite()) {
        return Err(TrajectoryError::InvalidParams {
            what: "pivot must be finite",
        });
    }

    let initial = &params.initial_pose;
    let center0 = initial.camera_center();
    let (_right, down, forward) = initial.axes_in_world();

    if motion == MotionType::Orbit && (center0 - params.pivot).norm() < 1e-9 {
        return Err(TrajectoryError::DegenerateOrbit);
    }

    let mut poses = Vec::with_capacity(t_count);
    poses.push(initial.clone());
    for t in 1..t_count {
        let s = t as f64 / (t_count - 1) as f64;
        let pose = match motion {
            MotionType::Stationary => initial.clone(),
            MotionType::ZoomIn | MotionType::ZoomOut => {
                let sign = if motion == MotionType::ZoomIn { 1.0 } else { -1.0 };
                let center = center0 + forward * (sign * s * magnitude);
                Pose {
                    rotation: initial.rotation,
                    translation: -(initial.rotation * center),
                }
            }
            MotionType::TurnLeft | MotionType::TurnRight => {
                // In-place yaw about the camera's own vertical axis; a
                // positive camera-frame angle swings the forward axis left.
                let sign = if motion == MotionType::TurnLeft { 1.0 } else { -1.0 };
                let delta = rotation_about(&Unit::new_unchecked(Vector3::y()), sign * s * magnitude);
                let rotation = delta * initial.rotation;
                Pose {
                    rotation,
                    translation: -(rotation * center0),
                }
            }
            MotionType::LookUp | MotionType::LookDown => {
                // In-place pitch about the camera's own horizontal axis; a
                // positive camera-frame angle tips the forward axis down.
                let sign = if motion == MotionType::LookDown { 1.0 } else { -1.0 };
                let delta = rotation_about(&Unit::new_unchecked(Vector3::x()), sign * s * magnitude);
                let rotation = delta * initial.rotation;
                Pose {
                    rotation,
                    translation: -(rotation * center0),
                }
            }
            MotionType::Orbit => {
                // Rigid rotation of the camera about an axis through the
                // pivot along the initial up direction. The pivot's
                // camera-frame position is invariant by construction.
                let axis = Unit::new_normalize(-down);
                let angle = s * magnitude;
                let rot = rotation_about(&axis, -angle);
                let world_inv = Pose {
                    rotation: rot,
                    translation: params.pivot - rot * params.pivot,
                };
                geometry::compose(initial, &world_inv)
            }
        };
        poses.push(pose);
    }
    Ok(poses)
}

/// One 3D-to-pixel correspondence for pose refinement.
#[derive(Debug, Clone, Copy)]
pub struct Landmark {
    pub world: Vector3<f64>,
    pub u: f64,
    pub v: f64,
}

/// Outcome of [`refine_pose`].
#[derive(Debug, Clone)]
pub struct RefinedPose {
    pub pose: Pose,
    /// Gauss-Newton iterations actually applied.
    pub iterations: usize,
    pub initial_rms: f64,
    pub final_rms: f64,
}

/// Damping added to the normal equations each iteration.
pub const REFINE_DAMPING: f64 = 1e-8;
/// Conditioning bound above which the normal equations are reported
/// singular.
pub const REFINE_MAX_CONDITIONING: f64 = 1e12;

fn reprojection_rms(pose: &Pose, landmarks: &[Landmark], k: &Intrinsics) -> Result<f64> {
    let mut sum = 0.0;
    for lm in landmarks {
        let (u, v, _) = geometry::project(&lm.world, pose, k)?;
        sum += (u - lm.u).powi(2) + (v - lm.v).powi(2);
    }
    Ok((sum / landmarks.len() as f64).sqrt())
}

/// Gauss-Newton pose refinement on the 6-dof tangent, left-perturbation
/// parameterization `(R, t) <- (exp(w) R, exp(w) t + v)`.
///
/// Stops when the update norm drops below `tol`, after `max_iters`
/// iterations, or as soon as a step fails to lower the RMS reprojection
/// error (the step is rolled back, so the returned RMS never exceeds the
/// initial one).
pub fn refine_pose(
    initial_pose: &Pose,
    landmarks: &[Landmark],
    k: &Intrinsics,
    max_iters: usize,
    tol: f64,
) -> Result<RefinedPose> {
    if landmarks.len() < 3 {
        return Err(TrajectoryError::InsufficientLandmarks {
            got: landmarks.len(),
        });
    }
    let mut pose = initial_pose.clone();
    let initial_rms = reprojection_rms(&pose, landmarks, k)?;
    let mut rms = initial_rms;
    let mut iterations = 0;

    for _ in 0..max_iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for lm in landmarks {
            let p = pose.apply(&lm.world);
            if p.z <= 0.0 {
                return Err(GeometryError::BehindCamera { z: p.z }.into());
            }
            let (u, v, _) = geometry::project(&lm.world, &pose, k)?;
            let r = Vector2::new(u - lm.u, v - lm.v);
            // d(pi)/d(p_cam)
            let inv_z = 1.0 / p.z;
            let j_proj = nalgebra::Matrix2x3::new(
                k.fx * inv_z,
                0.0,
                -k.fx * p.x * inv_z * inv_z,
                0.0,
                k.fy * inv_z,
                -k.fy * p.y * inv_z * inv_z,
            );
            // d(p_cam)/d(w, v) = [-[p]x | I]
            let skew = Matrix3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0);
            let j_rot = j_proj * (-skew);
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_rot);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&j_proj);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        h += Matrix6::identity() * REFINE_DAMPING;

        let eigen = h.symmetric_eigen();
        let max_eig = eigen.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let min_eig = eigen
            .eigenvalues
            .iter()
            .map(|e| e.abs())
            .fold(f64::MAX, f64::min);
        let conditioning = max_eig / min_eig.max(f64::MIN_POSITIVE);
        if !conditioning.is_finite() || conditioning > REFINE_MAX_CONDITIONING {
            return Err(TrajectoryError::SingularNormalEquations { conditioning });
        }

        let mut scaled = -g;
        eigen.eigenvectors.tr_mul_to(&(-g), &mut scaled);
        let delta_eig = scaled.component_div(&eigen.eigenvalues);
        let delta: Vector6<f64> = eigen.eigenvectors * delta_eig;

        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        let delta_rot = Rotation3::new(w).into_inner();
        let candidate = Pose {
            rotation: delta_rot * pose.rotation,
            translation: delta_rot * pose.translation + v,
        };
        let candidate_rms = reprojection_rms(&candidate, landmarks, k)?;
        if candidate_rms > rms {
            break;
        }
        pose = candidate;
        rms = candidate_rms;
        iterations += 1;
        if delta.norm() < tol {
            break;
        }
    }

    Ok(RefinedPose {
        pose,
        iterations,
        initial_rms,
        final_rms: rms,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryEntry {
    t: usize,
    #[serde(flatten)]
    pose: Pose,
}

/// Serializes poses as a JSON array of `{t, rotation, translation}`
/// records with row-major rotations.
pub fn trajectory_to_json(poses: &[Pose]) -> Result<String> {
    let entries: Vec<TrajectoryEntry> = poses
        .iter()
        .enumerate()
        .map(|(t, pose)| TrajectoryEntry {
            t,
            pose: pose.clone(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&entries)?)
}

/// Parses [`trajectory_to_json`] output, re-validating every rotation and
/// requiring `t` to run 0, 1, 2, ...
pub fn trajectory_from_json(json: &str) -> Result<Vec<Pose>> {
    let entries: Vec<TrajectoryEntry> = serde_json::from_str(json)?;
    for (i, e) in entries.iter().enumerate() {
        if e.t != i {
            return Err(TrajectoryError::MalformedTrajectory(format!(
                "expected t = {i}, found t = {}",
                e.t
            )));
        }
    }
    Ok(entries.into_iter().map(|e| e.pose).collect())
}

pub fn save_trajectory(poses: &[Pose], path: &std::path::Path) -> Result<()> {
    std::fs::write(path, trajectory_to_json(poses)?)?;
    Ok(())
}

pub fn load_trajectory(path: &std::path::Path) -> Result<Vec<Pose>> {
    trajectory_from_json(&std::fs::read_to_string(path)?)
}
