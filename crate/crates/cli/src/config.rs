//! Run configuration: one JSON document with an explicit schema version.
//! Unknown keys are rejected so typos fail fast, and every field has a
//! default, so the empty `{"schema_version": 1}` document is a complete,
//! runnable demo configuration.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use scene4d::fewshot::{EpisodeConfig, TrainConfig};
use scene4d::recon::{FieldConfig, FieldTrainConfig};
use scene4d::trajectory::MotionType;
use scene4d::{geometry, Intrinsics, Pose};

/// Config document version this binary reads.
pub const SCHEMA_VERSION: u32 = 1;

fn d_seed() -> u64 {
    7
}
fn d_motion() -> MotionType {
    MotionType::Orbit
}
fn d_frames() -> usize {
    12
}
fn d_fps() -> f64 {
    8.0
}
fn d_tau() -> f64 {
    1.5
}
fn d_holdout() -> usize {
    4
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Must equal [`SCHEMA_VERSION`].
    pub schema_version: u32,
    /// Global seed for scene generation, classifier and field training.
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Camera motion generated by the trajectory stage.
    #[serde(default = "d_motion")]
    pub motion: MotionType,
    /// Trajectory length `T >= 1`.
    #[serde(default = "d_frames")]
    pub frames: usize,
    /// Simulation frame rate, frames per second.
    #[serde(default = "d_fps")]
    pub fps: f64,
    /// Motion magnitude override (meters or radians depending on the
    /// motion); the per-motion default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default)]
    pub scene: SceneConfig,
    /// Flow-residual threshold for dynamic segmentation, pixels.
    #[serde(default = "d_tau")]
    pub tau: f64,
    /// Every `holdout_stride`-th frame (excluding frame 0) is kept out
    /// of fusion and used as an evaluation target; 0 disables holdouts.
    #[serde(default = "d_holdout")]
    pub holdout_stride: usize,
    #[serde(default)]
    pub classify: ClassifyConfig,
    #[serde(default)]
    pub field: FieldStageConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

impl Default for Config {
    fn default() -> Self {
        serde_json::from_str(r#"{"schema_version": 1}"#)
            .expect("the minimal document satisfies every default")
    }
}

/// Pinhole camera and its starting placement: at `distance` along -z
/// from the origin, looking at the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    /// Principal point; the image center `(width - 1) / 2` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    /// Starting distance from the scene origin, meters.
    pub distance: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fx: 96.0,
            fy: 96.0,
            cx: None,
            cy: None,
            distance: 2.0,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics, String> {
        let cx = self.cx.unwrap_or((self.width as f64 - 1.0) / 2.0);
        let cy = self.cy.unwrap_or((self.height as f64 - 1.0) / 2.0);
        Intrinsics::new(self.fx, self.fy, cx, cy, self.width, self.height)
            .map_err(|e| format!("camera: {e}"))
    }

    pub fn initial_pose(&self) -> Result<Pose, String> {
        geometry::look_at(
            &Vector3::new(0.0, 0.0, -self.distance),
            &Vector3::zeros(),
            &Vector3::new(0.0, 1.0, 0.0),
        )
        .map_err(|e| format!("camera: {e}"))
    }
}

/// Scene content: either a scene-spec JSON on disk, or a procedural
/// scene (random points in a box, an optional moving cluster, and
/// optional camera-facing quads).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Path to a scene-spec JSON; replaces the procedural generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    pub static_points: usize,
    /// Half-extent of the static point box around the origin, meters.
    pub extent: f64,
    pub colors: ColorConfig,
    /// One rigidly moving point cluster, or `null` for a static scene.
    pub moving: Option<MovingConfig>,
    /// Axis-aligned quads facing the camera, each split into two
    /// triangles.
    pub quads: Vec<QuadConfig>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            spec: None,
            static_points: 600,
            extent: 0.45,
            colors: ColorConfig::default(),
            moving: Some(MovingConfig::default()),
            quads: Vec::new(),
        }
    }
}

/// How procedural points are colored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorMode {
    /// Color channels follow the point's x/y/z position, so nearby
    /// points have nearby colors.
    Gradient,
    /// Independent uniform colors per point.
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorConfig {
    pub mode: ColorMode,
    /// Total color range used by the gradient, per channel (0.8 spreads
    /// channels over [0.1, 0.9] across the scene extent).
    pub span: f64,
}

impl Default for ColorConfig {
    fn default() -> Self {
        Self {
            mode: ColorMode::Gradient,
            span: 0.8,
        }
    }
}

/// One rigidly translating point cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MovingConfig {
    pub points: usize,
    /// Cluster ball radius, meters.
    pub radius: f64,
    /// Cluster center at `t = 0`, relative to the scene origin.
    pub offset: [f64; 3],
    /// Constant velocity, meters per second.
    pub velocity: [f64; 3],
}

impl Default for MovingConfig {
    fn default() -> Self {
        Self {
            points: 80,
            radius: 0.08,
            offset: [-0.15, 0.05, -0.3],
            velocity: [0.35, 0.0, 0.0],
        }
    }
}

/// An axis-aligned quad at fixed z, split into two triangles with
/// individually chosen colors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadConfig {
    pub center: [f64; 3],
    /// Half side length along x and y, meters.
    pub half_size: f64,
    /// Colors of the two triangles.
    pub colors: [[f64; 3]; 2],
}

fn d_per_class() -> usize {
    12
}
fn d_eval_per_class() -> usize {
    4
}

/// Few-shot classifier stage settings; the synthetic dataset is built
/// from the global seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Training images generated per motion class.
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    /// Held-out images per class scored after training.
    #[serde(default = "d_eval_per_class")]
    pub eval_per_class: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Extra image to classify with the trained model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            per_class: d_per_class(),
            eval_per_class: d_eval_per_class(),
            train: TrainConfig::default(),
            input: None,
        }
    }
}

/// Feature-field training inside the reconstruct stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldStageConfig {
    pub enabled: bool,
    pub token_dim: usize,
    pub scene_tokens: usize,
    pub heads: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Surface samples come from every `pixel_stride`-th pixel.
    pub pixel_stride: usize,
    /// Free-space samples per surface ray.
    pub free_per_ray: usize,
}

impl Default for FieldStageConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            token_dim: 16,
            scene_tokens: 4,
            heads: 2,
            hidden: 32,
            epochs: 2,
            batch: 64,
            lr: 5e-3,
            pixel_stride: 8,
            free_per_ray: 2,
        }
    }
}

impl FieldStageConfig {
    pub fn field_config(&self, seed: u64) -> FieldConfig {
        FieldConfig {
            token_dim: self.token_dim,
            scene_tokens: self.scene_tokens,
            heads: self.heads,
            hidden: self.hidden,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> FieldTrainConfig {
        FieldTrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed,
        }
    }
}

/// What the evaluate stage compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Re-render the fused static cloud at target poses and compare it
    /// against the oracle observations.
    #[default]
    Reconstruction,
    /// Compare the oracle observations against themselves (sanity
    /// check; PSNR clamps to 99 dB and SSIM is exactly 1).
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub mode: EvalMode,
}

/// Command-line overrides applied on top of the loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub motion: Option<MotionType>,
    pub frames: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Config {
    /// Loads the config file, or the default configuration when no path
    /// is given.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn apply_overrides(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(motion) = overrides.motion {
            self.motion = motion;
        }
        if let Some(frames) = overrides.frames {
            self.frames = frames;
        }
        if let Some(out) = &overrides.out {
            self.out = Some(out.clone());
        }
    }

    /// Validates every field, including that referenced paths exist.
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.frames == 0 {
            return Err("frames must be at least 1".to_string());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(format!("fps must be finite and positive, got {}", self.fps));
        }
        if let Some(m) = self.magnitude {
            if !(m.is_finite() && m > 0.0) {
                return Err(format!("magnitude must be finite and positive, got {m}"));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(format!("tau must be finite and positive, got {}", self.tau));
        }
        self.camera.intrinsics()?;
        if !(self.camera.distance.is_finite() && self.camera.distance > 0.0) {
            return Err(format!(
                "camera.distance must be finite and positive, got {}",
                self.camera.distance
            ));
        }
        self.validate_scene()?;
        self.validate_classify()?;
        self.validate_field()?;
        Ok(())
    }

    fn validate_scene(&self) -> Result<(), String> {
        let s = &self.scene;
        if let Some(spec) = &s.spec {
            if !spec.is_file() {
                return Err(format!("scene.spec {} does not exist", spec.display()));
            }
        }
        if !(s.extent.is_finite() && s.extent > 0.0) {
            return Err(format!(
                "scene.extent must be finite and positive, got {}",
                s.extent
            ));
        }
        if !(0.0..=0.9).contains(&s.colors.span) {
            return Err(format!(
                "scene.colors.span must be within [0, 0.9], got {}",
                s.colors.span
            ));
        }
        if let Some(moving) = &s.moving {
            if moving.points == 0 {
                return Err("scene.moving.points must be at least 1".to_string());
            }
            if !(moving.radius.is_finite() && moving.radius > 0.0) {
                return Err(format!(
                    "scene.moving.radius must be finite and positive, got {}",
                    moving.radius
                ));
            }
            let finite =
                |v: &[f64; 3]| v.iter().all(|c| c.is_finite());
            if !finite(&moving.offset) || !finite(&moving.velocity) {
                return Err("scene.moving offset/velocity must be finite".to_string());
            }
        }
        for (i, quad) in s.quads.iter().enumerate() {
            if !quad.center.iter().all(|c| c.is_finite()) {
                return Err(format!("scene.quads[{i}].center must be finite"));
            }
            if !(quad.half_size.is_finite() && quad.half_size > 0.0) {
                return Err(format!(
                    "scene.quads[{i}].half_size must be finite and positive"
                ));
            }
            let ok = quad
                .colors
                .iter()
                .flatten()
                .all(|c| c.is_finite() && (0.0..=1.0).contains(c));
            if !ok {
                return Err(format!("scene.quads[{i}].colors must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn validate_classify(&self) -> Result<(), String> {
        let c = &self.classify;
        let episode: &EpisodeConfig = &c.train.episode;
        if c.per_class < episode.shots + episode.queries {
            return Err(format!(
                "classify.per_class ({}) must cover shots + queries ({} + {})",
                c.per_class, episode.shots, episode.queries
            ));
        }
        if let Some(input) = &c.input {
            if !input.is_file() {
                return Err(format!(
                    "classify.input {} does not exist",
                    input.display()
                ));
            }
        }
        // The trainer re-validates these, but rejecting them at load
        // time keeps misconfigurations on exit code 2.
        if !(c.train.lr.is_finite() && c.train.lr >= 0.0) {
            return Err(format!("classify.train.lr must be finite, got {}", c.train.lr));
        }
        if c.train.epochs == 0
            || c.train.episodes_per_epoch == 0
            || c.train.lr_decay_every == 0
        {
            return Err(
                "classify.train epochs, episodes_per_epoch, and lr_decay_every must be positive"
                    .to_string(),
            );
        }
        if !(0.0..1.0).contains(&c.train.dropout) {
            return Err(format!(
                "classify.train.dropout must lie in [0, 1), got {}",
                c.train.dropout
            ));
        }
        if episode.classes_per_episode == 0
            || episode.classes_per_episode > scene4d::fewshot::CLASS_COUNT
        {
            return Err(format!(
                "classify.train.episode.classes_per_episode must lie in 1..={}",
                scene4d::fewshot::CLASS_COUNT
            ));
        }
        if episode.shots == 0 || episode.queries == 0 {
            return Err("classify.train.episode shots and queries must be positive".to_string());
        }
        Ok(())
    }

    fn validate_field(&self) -> Result<(), String> {
        let f = &self.field;
        if !f.enabled {
            return Ok(());
        }
        if f.token_dim == 0 || f.hidden == 0 || f.heads == 0 {
            return Err("field token_dim, hidden, and heads must be positive".to_string());
        }
        if f.token_dim % f.heads != 0 {
            return Err(format!(
                "field.token_dim {} must be divisible by field.heads {}",
                f.token_dim, f.heads
            ));
        }
        if f.epochs == 0 || f.batch == 0 || f.pixel_stride == 0 {
            return Err("field epochs, batch, and pixel_stride must be positive".to_string());
        }
        if !(f.lr.is_finite() && f.lr >= 0.0) {
            return Err(format!("field.lr must be finite and non-negative, got {}", f.lr));
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration. The output directory is
    /// excluded: where artifacts land does not change what they are.
    pub fn sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut canonical = self.clone();
        canonical.out = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            write!(hex, "{byte:02x}").expect("writing to a string");
        }
        hex
    }
}
