//! Oracle scene simulator: deterministic, noise-free renders of small
//! dynamic point/triangle scenes, together with the ground-truth depth,
//! flow, occlusion, and per-pixel provenance a reconstruction stage can
//! be scored against. Stands in for a learned multi-view generator.

use nalgebra::{Rotation3, Unit, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, DepthMap, GeometryError, Intrinsics, Pose};
use crate::img::{ImgError, Mask, RgbImage};

/// Depth slack when deciding whether a reprojected surface point is
/// hidden behind the rendered depth buffer, in meters.
pub const OCCLUSION_EPS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {what}")]
    InvalidSpec { what: String },
    #[error("frame rate must be positive and finite (got {fps})")]
    InvalidFps { fps: f64 },
    #[error("frame index {index} out of range for {count} poses")]
    FrameOutOfRange { index: usize, count: usize },
    #[error("malformed frame sidecar: {what}")]
    MalformedSidecar { what: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Rigid motion of one scene object over time. Positions are functions of
/// absolute time in seconds; every model is the identity at `t = 0`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MotionModel {
    /// `p(t) = p0 + velocity * t`, meters per second.
    ConstantVelocity { velocity: Vector3<f64> },
    /// Rotation about the axis through `point` along `axis`,
    /// `rad_per_sec` radians per second.
    RotateAboutAxis {
        point: Vector3<f64>,
        axis: Vector3<f64>,
        rad_per_sec: f64,
    },
    /// `p(t) = p0 + dir * amplitude * sin(2 pi hz t)`; `direction` is
    /// normalized internally, `amplitude` is meters.
    Oscillate {
        direction: Vector3<f64>,
        amplitude: f64,
        hz: f64,
    },
}

impl MotionModel {
    fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(SceneError::InvalidSpec {
                what: what.to_string(),
            })
        };
        match self {
            MotionModel::ConstantVelocity { velocity } => {
                if !velocity.iter().all(|v| v.is_finite()) {
                    return bad("non-finite velocity");
                }
            }
            MotionModel::RotateAboutAxis {
                point,
                axis,
                rad_per_sec,
            } => {
                if !point.iter().all(|v| v.is_finite()) || !rad_per_sec.is_finite() {
                    return bad("non-finite rotation parameters");
                }
                if !axis.iter().all(|v| v.is_finite()) || axis.norm() < 1e-12 {
                    return bad("rotation axis must be a nonzero vector");
                }
            }
            MotionModel::Oscillate {
                direction,
                amplitude,
                hz,
            } => {
                if !amplitude.is_finite() || !hz.is_finite() {
                    return bad("non-finite oscillation parameters");
                }
                if !direction.iter().all(|v| v.is_finite()) || direction.norm() < 1e-12 {
                    return bad("oscillation direction must be a nonzero vector");
                }
            }
        }
        Ok(())
    }

    /// Position at `time` of a point whose `t = 0` position is `base`.
    pub fn position_at(&self, base: &Vector3<f64>, time: f64) -> Vector3<f64> {
        self.advance(base, 0.0, time)
    }

    /// Rigidly carries a point of this object from `t0` to `t1`.
    pub fn advance(&self, p: &Vector3<f64>, t0: f64, t1: f64) -> Vector3<f64> {
        match self {
            MotionModel::ConstantVelocity { velocity } => p + velocity * (t1 - t0),
            MotionModel::RotateAboutAxis {
                point,
                axis,
                rad_per_sec,
            } => {
                let rot = Rotation3::from_axis_angle(
                    &Unit::new_normalize(*axis),
                    rad_per_sec * (t1 - t0),
                );
                point + rot * (p - point)
            }
            MotionModel::Oscillate {
                direction,
                amplitude,
                hz,
            } => {
                let phase = |t: f64| (std::f64::consts::TAU * hz * t).sin();
                p + direction.normalize() * (*amplitude * (phase(t1) - phase(t0)))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Primitive {
    /// Individually colored points; `positions` and `colors` must have
    /// equal lengths.
    Points {
        positions: Vec<Vector3<f64>>,
        colors: Vec<[f64; 3]>,
    },
    /// One flat-colored triangle.
    Triangle {
        vertices: [Vector3<f64>; 3],
        color: [f64; 3],
    },
}

/// A primitive plus its (optional) motion; `motion: None` means static.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub primitive: Primitive,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<MotionModel>,
}

/// Axis-aligned bounding box, meters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

/// Complete scene description; serializable as the `scene.json` artifact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// Nominal extent of the scene at `t = 0`.
    pub extent: Aabb,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let finite_color =
            |c: &[f64; 3]| c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        for obj in &self.objects {
            match &obj.primitive {
                Primitive::Points { positions, colors } => {
                    if positions.len() != colors.len() {
                        return Err(SceneError::InvalidSpec {
                            what: format!(
                                "point cluster has {} positions but {} colors",
                                positions.len(),
                                colors.len()
                            ),
                        });
                    }
                    if !positions.iter().all(|p| p.iter().all(|v| v.is_finite())) {
                        return Err(SceneError::InvalidSpec {
                            what: "non-finite point position".to_string(),
                        });
                    }
                    if !colors.iter().all(finite_color) {
                        return Err(SceneError::InvalidSpec {
                            what: "point color outside [0, 1]".to_string(),
                        });
                    }
                }
                Primitive::Triangle { vertices, color } => {
                    if !vertices.iter().all(|p| p.iter().all(|v| v.is_finite())) {
                        return Err(SceneError::InvalidSpec {
                            what: "non-finite triangle vertex".to_string(),
                        });
                    }
                    if !finite_color(color) {
                        return Err(SceneError::InvalidSpec {
                            what: "triangle color outside [0, 1]".to_string(),
                        });
                    }
                }
            }
            if let Some(motion) = &obj.motion {
                motion.validate()?;
            }
        }
        Ok(())
    }

    /// Per-element motion table; index = element id as assigned by
    /// [`scene_state_at`].
    pub fn element_motions(&self) -> Vec<Option<MotionModel>> {
        let mut motions = Vec::new();
        for obj in &self.objects {
            let count = match &obj.primitive {
                Primitive::Points { positions, .. } => positions.len(),
                Primitive::Triangle { .. } => 1,
            };
            for _ in 0..count {
                motions.push(obj.motion.clone());
            }
        }
        motions
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One renderable point at a fixed time.
#[derive(Debug, Clone)]
pub struct StatePoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
    pub dynamic: bool,
    /// Stable element id, consistent across all times of one spec.
    pub element: u32,
}

#[derive(Debug, Clone)]
pub struct StateTriangle {
    pub vertices: [Vector3<f64>; 3],
    pub color: [f64; 3],
    pub dynamic: bool,
    pub element: u32,
}

/// Scene snapshot at one frame time.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub frame: usize,
    /// Seconds since `t = 0`.
    pub time: f64,
    pub points: Vec<StatePoint>,
    pub triangles: Vec<StateTriangle>,
}

/// Evaluates all object motions at `frame / fps` seconds.
pub fn scene_state_at(spec: &SceneSpec, frame: usize, fps: f64) -> Result<SceneState> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(SceneError::InvalidFps { fps });
    }
    let time = frame as f64 / fps;
    let mut points = Vec::new();
    let mut triangles = Vec::new();
    let mut element: u32 = 0;
    for obj in &spec.objects {
        let dynamic = obj.motion.is_some();
        match &obj.primitive {
            Primitive::Points { positions, colors } => {
                for (pos, color) in positions.iter().zip(colors) {
                    let position = match &obj.motion {
                        Some(m) => m.position_at(pos, time),
                        None => *pos,
                    };
                    points.push(StatePoint {
                        position,
                        color: *color,
                        dynamic,
                        element,
                    });
                    element += 1;
                }
            }
            Primitive::Triangle { vertices, color } => {
                let vertices = match &obj.motion {
                    Some(m) => [
                        m.position_at(&vertices[0], time),
                        m.position_at(&vertices[1], time),
                        m.position_at(&vertices[2], time),
                    ],
                    None => *vertices,
                };
                triangles.push(StateTriangle {
                    vertices,
                    color: *color,
                    dynamic,
                    element,
                });
                element += 1;
            }
        }
    }
    Ok(SceneState {
        frame,
        time,
        points,
        triangles,
    })
}

/// Per-pixel origin of a rendered frame: which scene element won the
/// z-buffer and whether it is dynamic. Oracle metadata only.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub element: Vec<Option<u32>>,
    pub dynamic: Vec<bool>,
}

/// One rendered observation: RGB, exact depth along each pixel ray, and
/// the pose/intrinsics it was rendered with. `provenance` is present on
/// freshly rendered frames and absent after a disk round trip.
#[derive(Debug, Clone)]
pub struct Frame {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub pose: Pose,
    pub time: usize,
    pub intrinsics: Intrinsics,
    pub provenance: Option<Provenance>,
}

impl Frame {
    /// Ground-truth dynamic mask, if provenance is available.
    pub fn dynamic_mask(&self) -> Option<Mask> {
        self.provenance.as_ref().map(|p| Mask {
            width: self.depth.width,
            height: self.depth.height,
            data: p.dynamic.clone(),
        })
    }

    /// Overwrites the per-pixel dynamic labels (element ids are cleared).
    /// Used to stamp segmentation results onto a frame before fusion.
    pub fn set_dynamic_labels(&mut self, mask: &Mask) {
        debug_assert_eq!(mask.width, self.depth.width);
        debug_assert_eq!(mask.height, self.depth.height);
        self.provenance = Some(Provenance {
            element: vec![None; mask.data.len()],
            dynamic: mask.data.clone(),
        });
    }
}

/// Renders a scene snapshot with z-buffered splatting.
///
/// A point splats exactly the pixel its projection rounds to, modeled as
/// a fronto-parallel patch: the stored depth is the point's camera z.
/// Triangles are rasterized at pixel centers with perspective-correct
/// depth, so every valid pixel backprojects onto the source surface.
/// Depth ties keep the earlier element; background stays black/invalid.
pub fn render_frame(state: &SceneState, pose: &Pose, k: &Intrinsics) -> Frame {
    let (w, h) = (k.width, k.height);
    let mut rgb = RgbImage::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let mut element = vec![None; w * h];
    let mut dynamic = vec![false; w * h];

    let put = |idx: usize,
                   z: f64,
                   color: [f64; 3],
                   el: u32,
                   dyn_flag: bool,
                   depth: &mut DepthMap,
                   rgb: &mut RgbImage,
                   element: &mut Vec<Option<u32>>,
                   dynamic: &mut Vec<bool>| {
        if !depth.valid[idx] || z < depth.values[idx] {
            depth.values[idx] = z;
            depth.valid[idx] = true;
            rgb.data[idx] = color;
            element[idx] = Some(el);
            dynamic[idx] = dyn_flag;
        }
    };

    for pt in &state.points {
        let (u, v, z) = match geometry::project(&pt.position, pose, k) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let c = u.round();
        let r = v.round();
        if c < 0.0 || r < 0.0 || c >= w as f64 || r >= h as f64 {
            continue;
        }
        let idx = r as usize * w + c as usize;
        put(
            idx, z, pt.color, pt.element, pt.dynamic, &mut depth, &mut rgb, &mut element,
            &mut dynamic,
        );
    }

    for tri in &state.triangles {
        let mut proj = [(0.0f64, 0.0f64, 0.0f64); 3];
        let mut ok = true;
        for (i, vert) in tri.vertices.iter().enumerate() {
            match geometry::project(vert, pose, k) {
                Ok(p) => proj[i] = p,
                Err(_) => {
                    // No clipping: a triangle crossing the camera plane is
                    // skipped entirely.
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let [(u0, v0, z0), (u1, v1, z1), (u2, v2, z2)] = proj;
        let area2 = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0);
        if area2.abs() < 1e-12 {
            continue;
        }
        let umin = u0.min(u1).min(u2).ceil().max(0.0) as usize;
        let umax = u0.max(u1).max(u2).floor().min((w - 1) as f64);
        let vmin = v0.min(v1).min(v2).ceil().max(0.0) as usize;
        let vmax = v0.max(v1).max(v2).floor().min((h - 1) as f64);
        if umax < 0.0 || vmax < 0.0 {
            continue;
        }
        for r in vmin..=(vmax as usize) {
            let py = r as f64;
            for c in umin..=(umax as usize) {
                let px = c as f64;
                let l0 = ((u1 - px) * (v2 - py) - (u2 - px) * (v1 - py)) / area2;
                let l1 = ((u2 - px) * (v0 - py) - (u0 - px) * (v2 - py)) / area2;
                let l2 = 1.0 - l0 - l1;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                // Screen-space barycentric interpolation of 1/z is the
                // exact ray/plane intersection depth.
                let inv_z = l0 / z0 + l1 / z1 + l2 / z2;
                let z = 1.0 / inv_z;
                let idx = r * w + c;
                put(
                    idx,
                    z,
                    tri.color,
                    tri.element,
                    tri.dynamic,
                    &mut depth,
                    &mut rgb,
                    &mut element,
                    &mut dynamic,
                );
            }
        }
    }

    Frame {
        rgb,
        depth,
        pose: pose.clone(),
        time: state.frame,
        intrinsics: k.clone(),
        provenance: Some(Provenance { element, dynamic }),
    }
}

/// Renders every pose of a trajectory; frames are independent and
/// rendered in parallel, output order matches `poses`.
pub fn render_sequence(
    spec: &SceneSpec,
    poses: &[Pose],
    k: &Intrinsics,
    fps: f64,
) -> Result<Vec<Frame>> {
    spec.validate()?;
    poses
        .par_iter()
        .enumerate()
        .map(|(t, pose)| {
            let state = scene_state_at(spec, t, fps)?;
            Ok(render_frame(&state, pose, k))
        })
        .collect()
}

/// Dense forward flow for one frame pair; `valid` is false wherever the
/// surface is unobserved at either endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            du: vec![0.0; width * height],
            dv: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn save_json(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string(self).expect("flow serializes"))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Depth at the pixel a continuous location rounds to, or `None` when
/// the rounded pixel is outside the raster or holds no surface.
fn depth_at_rounded(depth: &DepthMap, u: f64, v: f64) -> Option<f64> {
    let c = u.round();
    let r = v.round();
    if c < 0.0 || r < 0.0 || c >= depth.width as f64 || r >= depth.height as f64 {
        return None;
    }
    depth.get(c as usize, r as usize)
}

/// Ground-truth flow from frame `t` to `t + 1`: each observed surface
/// point is carried by its element's motion model and reprojected.
/// Pixels whose surface leaves the frustum, ends up behind the camera,
/// or is occluded at `t + 1` (depth test with [`OCCLUSION_EPS`] slack)
/// are invalid.
pub fn flow_gt(
    spec: &SceneSpec,
    pose_t: &Pose,
    pose_t1: &Pose,
    k: &Intrinsics,
    t: usize,
    fps: f64,
) -> Result<FlowField> {
    let state_t = scene_state_at(spec, t, fps)?;
    let state_t1 = scene_state_at(spec, t + 1, fps)?;
    let frame_t = render_frame(&state_t, pose_t, k);
    let frame_t1 = render_frame(&state_t1, pose_t1, k);
    let motions = spec.element_motions();
    let prov = frame_t.provenance.as_ref().expect("fresh render");

    let mut flow = FlowField::invalid(k.width, k.height);
    for r in 0..k.height {
        for c in 0..k.width {
            let idx = r * k.width + c;
            if !frame_t.depth.valid[idx] {
                continue;
            }
            let p = geometry::backproject(c as f64, r as f64, frame_t.depth.values[idx], pose_t, k)?;
            let el = prov.element[idx].expect("valid pixels carry provenance") as usize;
            let p1 = match &motions[el] {
                Some(m) => m.advance(&p, state_t.time, state_t1.time),
                None => p,
            };
            let (u1, v1, z1) = match geometry::project(&p1, pose_t1, k) {
                Ok(p) => p,
                Err(_) => continue,
            };
            if !k.contains(u1, v1) {
                continue;
            }
            if let Some(d) = depth_at_rounded(&frame_t1.depth, u1, v1) {
                if z1 > d + OCCLUSION_EPS {
                    continue;
                }
            }
            flow.du[idx] = u1 - c as f64;
            flow.dv[idx] = v1 - r as f64;
            flow.valid[idx] = true;
        }
    }
    Ok(flow)
}

/// Marks view-a pixels whose surface is occluded or out of frustum in
/// view b. Background pixels (no surface in a) are false.
pub fn occlusion_mask(
    state: &SceneState,
    pose_a: &Pose,
    pose_b: &Pose,
    k: &Intrinsics,
) -> Result<Mask> {
    let frame_a = render_frame(state, pose_a, k);
    let frame_b = render_frame(state, pose_b, k);
    let mut mask = Mask::empty(k.width, k.height);
    for r in 0..k.height {
        for c in 0..k.width {
            let idx = r * k.width + c;
            if !frame_a.depth.valid[idx] {
                continue;
            }
            let p = geometry::backproject(c as f64, r as f64, frame_a.depth.values[idx], pose_a, k)?;
            let occluded = match geometry::project(&p, pose_b, k) {
                Err(_) => true,
                Ok((u, v, _)) if !k.contains(u, v) => true,
                Ok((u, v, z)) => match depth_at_rounded(&frame_b.depth, u, v) {
                    Some(d) => z > d + OCCLUSION_EPS,
                    None => false,
                },
            };
            mask.data[idx] = occluded;
        }
    }
    Ok(mask)
}

/// Static points that win at least one z-buffer pixel across the given
/// poses: the visibility ground truth a fused static cloud is compared
/// against. Triangles are not included. Pose `i` is rendered at frame
/// index `i`; see [`visible_static_points_at`] for arbitrary indices.
pub fn visible_static_points(
    spec: &SceneSpec,
    poses: &[Pose],
    k: &Intrinsics,
    fps: f64,
) -> Result<Vec<Vector3<f64>>> {
    let indexed: Vec<(usize, Pose)> =
        poses.iter().enumerate().map(|(t, p)| (t, p.clone())).collect();
    visible_static_points_at(spec, &indexed, k, fps)
}

/// [`visible_static_points`] for a frame subset: each pose carries the
/// frame index it was captured at, so moving occluders are placed at the
/// right simulation time even when some frames are skipped.
pub fn visible_static_points_at(
    spec: &SceneSpec,
    frames: &[(usize, Pose)],
    k: &Intrinsics,
    fps: f64,
) -> Result<Vec<Vector3<f64>>> {
    let state0 = scene_state_at(spec, 0, fps)?;
    let mut by_element: std::collections::BTreeMap<u32, Vector3<f64>> = std::collections::BTreeMap::new();
    for pt in &state0.points {
        if !pt.dynamic {
            by_element.insert(pt.element, pt.position);
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for (t, pose) in frames {
        let state = scene_state_at(spec, *t, fps)?;
        let frame = render_frame(&state, pose, k);
        let prov = frame.provenance.as_ref().expect("fresh render");
        for (idx, el) in prov.element.iter().enumerate() {
            if let Some(el) = el {
                if frame.depth.valid[idx] && by_element.contains_key(el) {
                    seen.insert(*el);
                }
            }
        }
    }
    Ok(seen.iter().map(|el| by_element[el]).collect())
}

/// Procedural desk-scale scene: a box of static points, optionally with
/// one rigidly moving point cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralScene {
    pub seed: u64,
    pub static_points: usize,
    /// Half-extent of the static box around the origin, meters.
    pub extent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving: Option<MovingCluster>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovingCluster {
    pub points: usize,
    /// Cluster ball radius, meters.
    pub radius: f64,
    /// Cluster center offset from the origin at `t = 0`.
    pub offset: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl ProceduralScene {
    pub fn build(&self) -> SceneSpec {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        let e = self.extent;
        let mut objects = Vec::new();

        let mut positions = Vec::with_capacity(self.static_points);
        let mut colors = Vec::with_capacity(self.static_points);
        for _ in 0..self.static_points {
            positions.push(Vector3::new(
                rng.gen_range(-e..e),
                rng.gen_range(-e..e),
                rng.gen_range(-e..e),
            ));
            colors.push([
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            ]);
        }
        objects.push(SceneObject {
            primitive: Primitive::Points { positions, colors },
            motion: None,
        });

        if let Some(moving) = &self.moving {
            let mut positions = Vec::with_capacity(moving.points);
            let mut colors = Vec::with_capacity(moving.points);
            for _ in 0..moving.points {
                // Rejection-sample the unit ball for an even cluster.
                let p = loop {
                    let p = Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    if p.norm() <= 1.0 {
                        break p;
                    }
                };
                positions.push(moving.offset + p * moving.radius);
                colors.push([
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                ]);
            }
            objects.push(SceneObject {
                primitive: Primitive::Points { positions, colors },
                motion: Some(MotionModel::ConstantVelocity {
                    velocity: moving.velocity,
                }),
            });
        }

        let span = Vector3::new(e, e, e);
        SceneSpec {
            objects,
            extent: Aabb {
                min: -span,
                max: span,
            },
            seed: self.seed,
        }
    }
}

/// Disk layout for rendered frames: `rgb_{t:03}.png` (8-bit RGB),
/// `depth_{t:03}.png` (16-bit grayscale, 0 = invalid) plus a JSON sidecar
/// `frame_{t:03}.json` carrying time, pose, intrinsics, and the depth
/// scale. Ground-truth dynamic masks, when provenance is present, land in
/// `gtdyn_{t:03}.png`.
pub mod io {
    use super::*;
    use std::path::Path;

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct FrameSidecar {
        time: usize,
        depth_scale: f64,
        intrinsics: Intrinsics,
        pose: Pose,
    }

    fn rgb_name(t: usize) -> String {
        format!("rgb_{t:03}.png")
    }
    fn depth_name(t: usize) -> String {
        format!("depth_{t:03}.png")
    }
    fn sidecar_name(t: usize) -> String {
        format!("frame_{t:03}.json")
    }
    pub fn gt_dynamic_name(t: usize) -> String {
        format!("gtdyn_{t:03}.png")
    }
    pub fn flow_name(t: usize) -> String {
        format!("flow_{t:03}.json")
    }

    /// Quantizes a depth map to 16 bits. Valid pixels always encode as a
    /// nonzero raw value; 0 is reserved for invalid.
    fn save_depth_png(depth: &DepthMap, path: &Path) -> Result<f64> {
        let max_depth = depth
            .values
            .iter()
            .zip(&depth.valid)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
            .fold(0.0f64, f64::max);
        let scale = if max_depth > 0.0 {
            max_depth / 65535.0
        } else {
            1.0
        };
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            depth.width as u32,
            depth.height as u32,
        );
        for r in 0..depth.height {
            for c in 0..depth.width {
                let idx = r * depth.width + c;
                let raw = if depth.valid[idx] {
                    ((depth.values[idx] / scale).round() as u32).clamp(1, 65535) as u16
                } else {
                    0
                };
                img.put_pixel(c as u32, r as u32, image::Luma([raw]));
            }
        }
        img.save(path).map_err(ImgError::Png)?;
        Ok(scale)
    }

    fn load_depth_png(path: &Path, scale: f64) -> Result<DepthMap> {
        let img = image::open(path).map_err(ImgError::Png)?.into_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut depth = DepthMap::new(w, h);
        for r in 0..h {
            for c in 0..w {
                let raw = img.get_pixel(c as u32, r as u32)[0];
                if raw > 0 {
                    depth.set(c, r, raw as f64 * scale);
                }
            }
        }
        Ok(depth)
    }

    /// Writes one frame's artifacts into `dir`.
    pub fn save_frame(dir: &Path, frame: &Frame) -> Result<()> {
        let t = frame.time;
        let scale = save_depth_png(&frame.depth, &dir.join(depth_name(t)))?;
        frame.rgb.save_png(&dir.join(rgb_name(t)))?;
        if let Some(mask) = frame.dynamic_mask() {
            let gt = RgbImage::from_fn(mask.width, mask.height, |x, y| {
                if mask.get(x, y) {
                    [1.0; 3]
                } else {
                    [0.0; 3]
                }
            });
            gt.save_png(&dir.join(gt_dynamic_name(t)))?;
        }
        let sidecar = FrameSidecar {
            time: t,
            depth_scale: scale,
            intrinsics: frame.intrinsics.clone(),
            pose: frame.pose.clone(),
        };
        std::fs::write(
            dir.join(sidecar_name(t)),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    /// Loads one frame. Provenance does not survive the disk round trip.
    pub fn load_frame(dir: &Path, t: usize) -> Result<Frame> {
        let sidecar: FrameSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.join(sidecar_name(t)))?)?;
        if sidecar.time != t {
            return Err(SceneError::MalformedSidecar {
                what: format!("sidecar time {} does not match index {t}", sidecar.time),
            });
        }
        if !(sidecar.depth_scale.is_finite() && sidecar.depth_scale > 0.0) {
            return Err(SceneError::MalformedSidecar {
                what: format!("bad depth scale {}", sidecar.depth_scale),
            });
        }
        let rgb = RgbImage::load_png(&dir.join(rgb_name(t)))?;
        let depth = load_depth_png(&dir.join(depth_name(t)), sidecar.depth_scale)?;
        if rgb.width != sidecar.intrinsics.width
            || rgb.height != sidecar.intrinsics.height
            || depth.width != rgb.width
            || depth.height != rgb.height
        {
            return Err(SceneError::MalformedSidecar {
                what: "image dimensions disagree with intrinsics".to_string(),
            });
        }
        Ok(Frame {
            rgb,
            depth,
            pose: sidecar.pose,
            time: t,
            intrinsics: sidecar.intrinsics,
            provenance: None,
        })
    }

    /// Loads the ground-truth dynamic mask written by [`save_frame`],
    /// or `None` when the artifact is absent.
    pub fn load_gt_dynamic(dir: &Path, t: usize) -> Result<Option<Mask>> {
        let path = dir.join(gt_dynamic_name(t));
        if !path.exists() {
            return Ok(None);
        }
        let img = RgbImage::load_png(&path)?;
        Ok(Some(Mask {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|px| px[0] > 0.5).collect(),
        }))
    }
}
