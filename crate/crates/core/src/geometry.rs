//! Camera geometry: world-to-camera rigid poses, pinhole projection, and
//! the point-cloud / depth-map containers the rest of the pipeline moves
//! around.
//!
//! Conventions, fixed across the whole crate: right-handed coordinates,
//! camera `+z` looks forward, pixel `u` grows rightward and `v` downward,
//! and a pose maps world points into the camera frame as
//! `x_cam = R * x_world + t`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("depth must be positive and finite (got {depth})")]
    NonPositiveDepth { depth: f64 },
    #[error("pixel ({u}, {v}) outside the {width}x{height} image domain")]
    OutOfDomain {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("degenerate direction: {what}")]
    DegenerateDirection { what: &'static str },
    #[error("rotation is not orthonormal (max deviation {deviation:.3e})")]
    NotARotation { deviation: f64 },
    #[error("invalid intrinsics: {what}")]
    InvalidIntrinsics { what: &'static str },
    #[error("mismatched lengths in {what}")]
    LengthMismatch { what: &'static str },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ply: {0}")]
    MalformedPly(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Max tolerated deviation of `R^T R` from the identity (and of `det R`
/// from 1) when validating a rotation.
pub const ROTATION_TOL: f64 = 1e-9;

/// Rigid world-to-camera transform: `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let gram = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    gram.max(det)
}

impl Pose {
    /// Validates that `rotation` is a proper rotation (orthonormal,
    /// determinant 1, within [`ROTATION_TOL`]) and everything is finite.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite { what: "rotation" });
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite {
                what: "translation",
            });
        }
        let deviation = rotation_deviation(&rotation);
        if deviation > ROTATION_TOL {
            return Err(GeometryError::NotARotation { deviation });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera frame axes expressed in world coordinates:
    /// (right, down, forward) = rows of `R`.
    pub fn axes_in_world(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let rt = self.rotation.transpose();
        (rt.column(0).into(), rt.column(1).into(), rt.column(2).into())
    }

    /// Maps a world point into the camera frame.
    #[inline]
    pub fn apply(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    /// Row-major 3x3.
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        let record = PoseRecord {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        };
        record.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let record = PoseRecord::deserialize(deserializer)?;
        let rotation = Matrix3::from_row_slice(&record.rotation);
        let translation = Vector3::from_column_slice(&record.translation);
        Pose::new(rotation, translation).map_err(serde::de::Error::custom)
    }
}

/// Pinhole intrinsics over a `width x height` pixel grid. Pixel `(c, r)`
/// has continuous coordinates `u = c`, `v = r`; the image domain is
/// `[0, width) x [0, height)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::NonFinite { what: "intrinsics" });
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics {
                what: "focal lengths must be positive",
            });
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics {
                what: "image dimensions must be positive",
            });
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics {
                what: "principal point must lie inside the image domain",
            });
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// Projects a world point: returns `(u, v, depth)` with depth = camera z.
/// The pixel may land outside the image; only points at or behind the
/// camera plane are an error.
pub fn project(p_world: &Vector3<f64>, pose: &Pose, k: &Intrinsics) -> Result<(f64, f64, f64)> {
    if !p_world.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite { what: "point" });
    }
    let p = pose.apply(p_world);
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera { z: p.z });
    }
    let u = k.fx * p.x / p.z + k.cx;
    let v = k.fy * p.y / p.z + k.cy;
    Ok((u, v, p.z))
}

/// Lifts pixel `(u, v)` at `depth` back to world coordinates.
pub fn backproject(u: f64, v: f64, depth: f64, pose: &Pose, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(u.is_finite() && v.is_finite()) {
        return Err(GeometryError::NonFinite { what: "pixel" });
    }
    if !depth.is_finite() || depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth { depth });
    }
    if !k.contains(u, v) {
        return Err(GeometryError::OutOfDomain {
            u,
            v,
            width: k.width,
            height: k.height,
        });
    }
    let p_cam = Vector3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
    Ok(pose.rotation.transpose() * (p_cam - pose.translation))
}

/// `compose(a, b)` applies `b` first: `x -> a(b(x))`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(pose: &Pose) -> Pose {
    let rt = pose.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * pose.translation),
    }
}

/// World-to-camera pose for a camera at `eye` whose forward axis points
/// at `target`. `up` fixes the roll: the camera's down axis is `-up`
/// projected onto the image plane.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Pose> {
    for (v, what) in [(eye, "eye"), (target, "target"), (up, "up")] {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinite { what });
        }
    }
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(GeometryError::DegenerateDirection {
            what: "eye and target coincide",
        });
    }
    let z = forward.normalize();
    let right = up.cross(&z);
    if right.norm() < 1e-12 {
        return Err(GeometryError::DegenerateDirection {
            what: "up is parallel to the view direction",
        });
    }
    let x = right.normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::new(x.x, x.y, x.z, y.x, y.y, y.z, z.x, z.y, z.z);
    let translation = -(rotation * eye);
    Ok(Pose {
        rotation,
        translation,
    })
}

/// Colored point cloud with per-point provenance. All vectors share one
/// length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    /// Channels in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
    /// Index of the frame each point was lifted from.
    pub source_frames: Vec<u32>,
    pub dynamic: Vec<bool>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<Vector3<f64>>,
        colors: Vec<[f64; 3]>,
        source_frames: Vec<u32>,
        dynamic: Vec<bool>,
    ) -> Result<Self> {
        let n = positions.len();
        if colors.len() != n || source_frames.len() != n || dynamic.len() != n {
            return Err(GeometryError::LengthMismatch {
                what: "point cloud channels",
            });
        }
        if !positions.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite { what: "positions" });
        }
        Ok(Self {
            positions,
            colors,
            source_frames,
            dynamic,
        })
    }

    /// Cloud with no points.
    pub fn empty() -> Self {
        Self {
            positions: Vec::new(),
            colors: Vec::new(),
            source_frames: Vec::new(),
            dynamic: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vector3<f64>, color: [f64; 3], source_frame: u32, dynamic: bool) {
        self.positions.push(position);
        self.colors.push(color);
        self.source_frames.push(source_frame);
        self.dynamic.push(dynamic);
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
        self.source_frames.extend_from_slice(&other.source_frames);
        self.dynamic.extend_from_slice(&other.dynamic);
    }

    /// ASCII PLY with `x y z red green blue` vertices (colors 0-255).
    pub fn write_ply<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        write!(
            w,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
            self.len()
        )?;
        let mut line = String::new();
        for (p, c) in self.positions.iter().zip(&self.colors) {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            line.clear();
            let _ = writeln!(line, "{} {} {} {} {} {}", p.x, p.y, p.z, q(c[0]), q(c[1]), q(c[2]));
            w.write_all(line.as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_ply(&self, path: &Path) -> Result<()> {
        self.write_ply(std::fs::File::create(path)?)
    }

    /// Reads the ASCII PLY layout produced by [`PointCloud::write_ply`].
    /// Source frames come back as 0 and dynamic flags as false; the PLY
    /// format carries neither.
    pub fn read_ply<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| GeometryError::MalformedPly("unexpected end of file".into()))?
                .map_err(GeometryError::Io)
        };
        if next()?.trim() != "ply" {
            return Err(GeometryError::MalformedPly("missing ply magic".into()));
        }
        if next()?.trim() != "format ascii 1.0" {
            return Err(GeometryError::MalformedPly("expected ascii 1.0".into()));
        }
        let mut count: Option<usize> = None;
        let expected_props = ["x", "y", "z", "red", "green", "blue"];
        let mut props = Vec::new();
        loop {
            let line = next()?;
            let line = line.trim();
            if line == "end_header" {
                break;
            }
            if line.starts_with("comment") {
                continue;
            }
            if let Some(rest) = line.strip_prefix("element vertex ") {
                count = Some(rest.trim().parse().map_err(|_| {
                    GeometryError::MalformedPly(format!("bad vertex count: {rest}"))
                })?);
            } else if let Some(rest) = line.strip_prefix("property ") {
                let name = rest.split_whitespace().last().unwrap_or("");
                props.push(name.to_string());
            } else if line.starts_with("element ") {
                return Err(GeometryError::MalformedPly(format!(
                    "unsupported element: {line}"
                )));
            }
        }
        if props != expected_props {
            return Err(GeometryError::MalformedPly(format!(
                "expected properties {expected_props:?}, got {props:?}"
            )));
        }
        let count = count.ok_or_else(|| GeometryError::MalformedPly("missing vertex element".into()))?;
        let mut cloud = PointCloud::default();
        for _ in 0..count {
            let line = next()?;
            let mut it = line.split_whitespace();
            let mut f = || -> Result<f64> {
                it.next()
                    .ok_or_else(|| GeometryError::MalformedPly(format!("short vertex line: {line}")))?
                    .parse()
                    .map_err(|_| GeometryError::MalformedPly(format!("bad number in: {line}")))
            };
            let (x, y, z) = (f()?, f()?, f()?);
            let (r, g, b) = (f()?, f()?, f()?);
            cloud.push(
                Vector3::new(x, y, z),
                [r / 255.0, g / 255.0, b / 255.0],
                0,
                false,
            );
        }
        Ok(cloud)
    }

    pub fn load_ply(path: &Path) -> Result<Self> {
        Self::read_ply(std::fs::File::open(path)?)
    }
}

/// Applies a rigid transform to every point: `p -> R p + t`.
pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        positions: cloud.positions.iter().map(|p| pose.apply(p)).collect(),
        colors: cloud.colors.clone(),
        source_frames: cloud.source_frames.clone(),
        dynamic: cloud.dynamic.clone(),
    }
}

/// Dense depth map. `values[i]` is meaningful only where `valid[i]`;
/// valid depths are positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// All-invalid map.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.idx(x, y);
        self.valid[i].then(|| self.values[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        let i = self.idx(x, y);
        self.values[i] = depth;
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn mask(&self) -> crate::img::Mask {
        crate::img::Mask {
            width: self.width,
            height: self.height,
            data: self.valid.clone(),
        }
    }
}
