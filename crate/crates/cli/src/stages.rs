//! The five pipeline stages. Each stage reads only the on-disk
//! artifacts of earlier stages, writes its own artifacts under
//! `<out>/<stage>/`, and returns the relative paths it produced.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use scene4d::eval::{self, EvalError, FrameMetrics, MetricReport};
use scene4d::fewshot::{synthetic_motion_dataset, train_episodic, EXTRACTOR_ID};
use scene4d::geometry::PointCloud;
use scene4d::recon::{
    build_field_samples, ego_flow, fuse, render_cloud_nearest, segment_dynamic, train_field,
    FeatureField, SegLabel,
};
use scene4d::scenesim::{
    flow_gt, io as frame_io, render_sequence, visible_static_points_at, Aabb, FlowField,
    Frame, MovingCluster, Primitive, ProceduralScene, SceneObject, SceneSpec,
};
use scene4d::trajectory::{
    generate_trajectory, load_trajectory, save_trajectory, MotionType, TrajectoryParams,
};
use scene4d::{Mask, Pose, RgbImage};

use crate::config::{ColorMode, Config, EvalMode};
use crate::CliError;

/// Per-frame segmentation artifact (`reconstruct/seg_{t:03}.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegRecord {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    /// Residual threshold the labels were decided with, pixels.
    pub tau: f64,
    /// Row-major per-pixel labels.
    pub labels: Vec<SegLabel>,
}

/// Fusion summary (`reconstruct/fusion.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionRecord {
    /// Frames merged into the static cloud, in fusion order.
    pub fused_frames: Vec<usize>,
    /// Frames excluded from fusion and reserved as evaluation targets.
    pub holdout_frames: Vec<usize>,
    /// The trailing frame dropped because it has no forward flow.
    pub last_excluded: Option<usize>,
    pub static_points: usize,
}

/// Per-frame segmentation accuracy against the simulator's dynamic
/// flags (`evaluate/seg_report.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegFrameReport {
    pub frame: usize,
    /// Fraction of compared pixels whose label matches the flag;
    /// indeterminate (unknown) labels never match.
    pub agreement: f64,
    pub agreed: usize,
    /// Pixels with a valid oracle depth at this frame.
    pub compared: usize,
    pub unknown: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegReport {
    pub per_frame: Vec<SegFrameReport>,
    /// Total agreed / total compared over all frames, when any pixel
    /// was compared.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled_agreement: Option<f64>,
    pub total_compared: usize,
}

/// One classification outcome inside `classify/classification.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyResult {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<MotionType>,
    pub predicted: MotionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationRecord {
    pub extractor: String,
    pub seed: u64,
    /// Accuracy over the held-out synthetic queries, when any exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub results: Vec<ClassifyResult>,
}

/// Shorthand: converts any error into a stage failure.
macro_rules! stage {
    ($stage:literal, $expr:expr) => {
        $expr.map_err(|e| CliError::Stage {
            stage: $stage,
            message: e.to_string(),
        })?
    };
}

fn stage_dir(out: &Path, stage: &'static str) -> Result<PathBuf, CliError> {
    let dir = out.join(stage);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Stage {
        stage,
        message: format!("cannot create {}: {e}", dir.display()),
    })?;
    Ok(dir)
}

fn write_json<T: Serialize>(
    stage: &'static str,
    path: &Path,
    value: &T,
) -> Result<(), CliError> {
    let to_err = |message: String| CliError::Stage { stage, message };
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| to_err(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| to_err(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(
    stage: &'static str,
    path: &Path,
) -> Result<T, CliError> {
    let to_err = |message: String| CliError::Stage { stage, message };
    let text = std::fs::read_to_string(path)
        .map_err(|e| to_err(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| to_err(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------
// Scene construction
// ---------------------------------------------------------------------

/// Colors a point by its position: each channel follows one axis across
/// the scene extent, so nearby points get nearby colors.
fn gradient_color(p: &Vector3<f64>, extent: f64, span: f64) -> [f64; 3] {
    let half = span * 0.5;
    let channel = |v: f64| (0.5 + half * (v / extent)).clamp(0.05, 0.95);
    [channel(p.x), channel(p.y), channel(p.z)]
}

/// Builds the effective scene: from `scene.spec` when given, otherwise
/// procedurally from the config (points, optional moving cluster,
/// optional quads).
pub fn build_scene_spec(cfg: &Config) -> Result<SceneSpec, String> {
    let sc = &cfg.scene;
    if let Some(path) = &sc.spec {
        let spec = SceneSpec::load_json(path).map_err(|e| e.to_string())?;
        spec.validate().map_err(|e| e.to_string())?;
        return Ok(spec);
    }

    let mut spec = if sc.static_points > 0 || sc.moving.is_some() {
        ProceduralScene {
            seed: cfg.seed,
            static_points: sc.static_points,
            extent: sc.extent,
            moving: sc.moving.as_ref().map(|m| MovingCluster {
                points: m.points,
                radius: m.radius,
                offset: Vector3::from(m.offset),
                velocity: Vector3::from(m.velocity),
            }),
        }
        .build()
    } else {
        let span = Vector3::new(sc.extent, sc.extent, sc.extent);
        SceneSpec {
            objects: Vec::new(),
            extent: Aabb {
                min: -span,
                max: span,
            },
            seed: cfg.seed,
        }
    };

    if sc.colors.mode == ColorMode::Gradient {
        for obj in &mut spec.objects {
            if let Primitive::Points { positions, colors } = &mut obj.primitive {
                for (p, c) in positions.iter().zip(colors.iter_mut()) {
                    *c = gradient_color(p, sc.extent, sc.colors.span);
                }
            }
        }
    }

    for quad in &sc.quads {
        let [cx, cy, cz] = quad.center;
        let h = quad.half_size;
        let a = Vector3::new(cx - h, cy - h, cz);
        let b = Vector3::new(cx + h, cy - h, cz);
        let c = Vector3::new(cx + h, cy + h, cz);
        let d = Vector3::new(cx - h, cy + h, cz);
        for (vertices, color) in [([a, b, c], quad.colors[0]), ([a, c, d], quad.colors[1])] {
            spec.objects.push(SceneObject {
                primitive: Primitive::Triangle { vertices, color },
                motion: None,
            });
        }
    }

    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

// ---------------------------------------------------------------------
// trajectory
// ---------------------------------------------------------------------

pub fn run_trajectory(cfg: &Config, out: &Path) -> Result<Vec<String>, CliError> {
    const STAGE: &str = "trajectory";
    let dir = stage_dir(out, STAGE)?;
    let initial = cfg
        .camera
        .initial_pose()
        .map_err(|message| CliError::Stage { stage: STAGE, message })?;
    let mut params = TrajectoryParams::new(cfg.frames, initial, Vector3::zeros());
    params.magnitude = cfg.magnitude;
    let poses = stage!("trajectory", generate_trajectory(cfg.motion, &params));
    stage!("trajectory", save_trajectory(&poses, &dir.join("trajectory.json")));
    Ok(vec![format!("{STAGE}/trajectory.json")])
}

// ---------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------

fn trajectory_path(out: &Path) -> PathBuf {
    out.join("trajectory").join("trajectory.json")
}

fn load_poses(stage: &'static str, out: &Path) -> Result<Vec<Pose>, CliError> {
    let path = trajectory_path(out);
    if !path.is_file() {
        return Err(CliError::Stage {
            stage,
            message: format!(
                "{} is missing; run the trajectory stage first",
                path.display()
            ),
        });
    }
    Ok(stage!("simulate", load_trajectory(&path)))
}

pub fn run_simulate(cfg: &Config, out: &Path) -> Result<Vec<String>, CliError> {
    const STAGE: &str = "simulate";
    let dir = stage_dir(out, STAGE)?;
    let poses = load_poses(STAGE, out)?;
    let k = cfg
        .camera
        .intrinsics()
        .map_err(|message| CliError::Stage { stage: STAGE, message })?;
    let spec = build_scene_spec(cfg)
        .map_err(|message| CliError::Stage { stage: STAGE, message })?;
    stage!("simulate", spec.save_json(&dir.join("scene.json")));
    let mut files = vec![format!("{STAGE}/scene.json")];

    let frames = stage!("simulate", render_sequence(&spec, &poses, &k, cfg.fps));
    for frame in &frames {
        stage!("simulate", frame_io::save_frame(&dir, frame));
        let t = frame.time;
        files.push(format!("{STAGE}/rgb_{t:03}.png"));
        files.push(format!("{STAGE}/depth_{t:03}.png"));
        files.push(format!("{STAGE}/frame_{t:03}.json"));
        files.push(format!("{STAGE}/{}", frame_io::gt_dynamic_name(t)));
    }
    for t in 0..poses.len().saturating_sub(1) {
        let flow = stage!(
            "simulate",
            flow_gt(&spec, &poses[t], &poses[t + 1], &k, t, cfg.fps)
        );
        stage!("simulate", flow.save_json(&dir.join(frame_io::flow_name(t))));
        files.push(format!("{STAGE}/{}", frame_io::flow_name(t)));
    }
    Ok(files)
}

// ---------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------

/// Loads `frame_000 .. frame_{T-1}` until the first gap.
fn load_frames(stage: &'static str, sim: &Path) -> Result<Vec<Frame>, CliError> {
    let mut frames = Vec::new();
    loop {
        let t = frames.len();
        if !sim.join(format!("frame_{t:03}.json")).is_file() {
            break;
        }
        frames.push(frame_io::load_frame(sim, t).map_err(|e| CliError::Stage {
            stage,
            message: e.to_string(),
        })?);
    }
    if frames.is_empty() {
        return Err(CliError::Stage {
            stage,
            message: format!(
                "no frames under {}; run the simulate stage first",
                sim.display()
            ),
        });
    }
    Ok(frames)
}

/// Frames withheld from fusion: every `stride`-th index, except frame 0
/// (the reference view).
fn holdout_frames(t_count: usize, stride: usize) -> Vec<usize> {
    if stride == 0 {
        return Vec::new();
    }
    (1..t_count).filter(|t| t % stride == 0).collect()
}

fn seg_json_name(t: usize) -> String {
    format!("seg_{t:03}.json")
}

pub fn run_reconstruct(cfg: &Config, out: &Path) -> Result<Vec<String>, CliError> {
    const STAGE: &str = "reconstruct";
    let dir = stage_dir(out, STAGE)?;
    let sim = out.join("simulate");
    let mut frames = load_frames(STAGE, &sim)?;
    let t_count = frames.len();
    let k = frames[0].intrinsics.clone();
    let mut files = Vec::new();

    let holdouts: BTreeSet<usize> =
        holdout_frames(t_count, cfg.holdout_stride).into_iter().collect();

    // Segment every frame that has forward flow; stamp the labels onto
    // the frame so fusion sees predicted (never oracle) dynamic flags.
    // Indeterminate pixels are dropped from fusion entirely.
    for t in 0..t_count.saturating_sub(1) {
        let observed = stage!(
            "reconstruct",
            FlowField::load_json(&sim.join(frame_io::flow_name(t)))
        );
        let ego = ego_flow(&frames[t].depth, &frames[t].pose, &frames[t + 1].pose, &k);
        let seg = stage!("reconstruct", segment_dynamic(&observed, &ego, cfg.tau));
        let record = SegRecord {
            frame: t,
            width: seg.width,
            height: seg.height,
            tau: seg.tau,
            labels: seg.labels.clone(),
        };
        write_json(STAGE, &dir.join(seg_json_name(t)), &record)?;
        files.push(format!("{STAGE}/{}", seg_json_name(t)));

        let vis = RgbImage::from_fn(seg.width, seg.height, |x, y| {
            match seg.labels[y * seg.width + x] {
                SegLabel::Static => [0.0; 3],
                SegLabel::Dynamic => [1.0; 3],
                SegLabel::Unknown => [0.5; 3],
            }
        });
        stage!("reconstruct", vis.save_png(&dir.join(format!("seg_{t:03}.png"))));
        files.push(format!("{STAGE}/seg_{t:03}.png"));

        frames[t].set_dynamic_labels(&seg.dynamic_mask());
        for (idx, &label) in seg.labels.iter().enumerate() {
            if label == SegLabel::Unknown {
                frames[t].depth.valid[idx] = false;
            }
        }
    }

    let fused_indices: Vec<usize> = (0..t_count)
        .filter(|t| !holdouts.contains(t) && (t_count == 1 || *t < t_count - 1))
        .collect();
    if fused_indices.is_empty() {
        return Err(CliError::Stage {
            stage: STAGE,
            message: format!(
                "holdout_stride {} leaves no frame to fuse",
                cfg.holdout_stride
            ),
        });
    }
    let fused_frames: Vec<Frame> =
        fused_indices.iter().map(|&t| frames[t].clone()).collect();
    let scene = stage!("reconstruct", fuse(&fused_frames));
    stage!("reconstruct", scene.static_cloud.save_ply(&dir.join("static.ply")));
    files.push(format!("{STAGE}/static.ply"));
    for (i, &t) in fused_indices.iter().enumerate() {
        let name = format!("dynamic_{t:03}.ply");
        stage!("reconstruct", scene.dynamic_clouds[i].save_ply(&dir.join(&name)));
        files.push(format!("{STAGE}/{name}"));
    }

    let record = FusionRecord {
        fused_frames: fused_indices.clone(),
        holdout_frames: holdouts.iter().copied().collect(),
        last_excluded: (t_count > 1).then_some(t_count - 1),
        static_points: scene.static_cloud.len(),
    };
    write_json(STAGE, &dir.join("fusion.json"), &record)?;
    files.push(format!("{STAGE}/fusion.json"));

    if cfg.field.enabled {
        let mut field = stage!(
            "reconstruct",
            FeatureField::new(cfg.field.field_config(cfg.seed))
        );
        let samples = stage!(
            "reconstruct",
            build_field_samples(
                &fused_frames,
                cfg.field.pixel_stride,
                cfg.field.free_per_ray,
                cfg.seed,
            )
        );
        let stats = stage!(
            "reconstruct",
            train_field(&mut field, &samples, &cfg.field.train_config(cfg.seed))
        );
        stage!("reconstruct", field.save_checkpoint(&dir.join("field.json")));
        files.push(format!("{STAGE}/field.json"));
        write_json(STAGE, &dir.join("field_stats.json"), &stats)?;
        files.push(format!("{STAGE}/field_stats.json"));
    }

    Ok(files)
}

// ---------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------

/// Masked SSIM, falling back to the whole frame when the mask leaves no
/// window with enough valid pixels (sparse scenes).
fn ssim_with_fallback(a: &RgbImage, b: &RgbImage, mask: &Mask) -> eval::Result<f64> {
    match eval::ssim(a, b, Some(mask)) {
        Err(EvalError::EmptyInput { .. }) => eval::ssim(a, b, None),
        other => other,
    }
}

fn evaluate_identity(out: &Path, dir: &Path) -> Result<Vec<String>, CliError> {
    const STAGE: &str = "evaluate";
    let sim = out.join("simulate");
    let frames = load_frames(STAGE, &sim)?;
    let mut per_frame = Vec::new();
    for frame in &frames {
        let psnr = stage!("evaluate", eval::psnr(&frame.rgb, &frame.rgb, None));
        let ssim = stage!("evaluate", eval::ssim(&frame.rgb, &frame.rgb, None));
        per_frame.push(FrameMetrics {
            frame: frame.time,
            psnr,
            ssim,
            compared_pixels: frame.rgb.width * frame.rgb.height,
        });
    }
    let report = stage!("evaluate", MetricReport::from_frames(per_frame, None));
    stage!("evaluate", report.save_json(&dir.join("metrics.json")));
    Ok(vec!["evaluate/metrics.json".to_string()])
}

fn evaluate_reconstruction(
    cfg: &Config,
    out: &Path,
    dir: &Path,
) -> Result<Vec<String>, CliError> {
    const STAGE: &str = "evaluate";
    let sim = out.join("simulate");
    let rec = out.join("reconstruct");
    let fusion_path = rec.join("fusion.json");
    if !fusion_path.is_file() {
        return Err(CliError::Stage {
            stage: STAGE,
            message: format!(
                "{} is missing; run the reconstruct stage first",
                fusion_path.display()
            ),
        });
    }
    let fusion: FusionRecord = read_json(STAGE, &fusion_path)?;
    let static_cloud = stage!("evaluate", PointCloud::load_ply(&rec.join("static.ply")));
    let spec = stage!("evaluate", SceneSpec::load_json(&sim.join("scene.json")));
    let frames = load_frames(STAGE, &sim)?;
    let k = frames[0].intrinsics.clone();

    // Image metrics: re-render the fused static points at each held-out
    // pose (every pose when nothing was held out) and compare on pixels
    // the oracle covers with static content.
    let targets: Vec<usize> = if fusion.holdout_frames.is_empty() {
        (0..frames.len()).collect()
    } else {
        fusion
            .holdout_frames
            .iter()
            .copied()
            .filter(|&t| t < frames.len())
            .collect()
    };
    let mut per_frame = Vec::new();
    for &t in &targets {
        let frame = &frames[t];
        let (rendered, _coverage) = render_cloud_nearest(&static_cloud, &frame.pose, &k);
        let oracle = frame.depth.mask();
        let gtdyn = stage!("evaluate", frame_io::load_gt_dynamic(&sim, t))
            .unwrap_or_else(|| Mask::empty(oracle.width, oracle.height));
        let mut mask = Mask::empty(oracle.width, oracle.height);
        for i in 0..mask.data.len() {
            mask.data[i] = oracle.data[i] && !gtdyn.data[i];
        }
        let psnr = stage!("evaluate", eval::psnr(&rendered, &frame.rgb, Some(&mask)));
        let ssim = stage!("evaluate", ssim_with_fallback(&rendered, &frame.rgb, &mask));
        per_frame.push(FrameMetrics {
            frame: t,
            psnr,
            ssim,
            compared_pixels: mask.count(),
        });
    }

    // Geometry: Chamfer distance between the fused static cloud and the
    // points actually visible in the fused frames. Triangles have no
    // point-set ground truth, so scenes containing them skip this.
    let points_only = spec
        .objects
        .iter()
        .all(|o| matches!(o.primitive, Primitive::Points { .. }));
    let chamfer = if points_only && !static_cloud.is_empty() {
        let fused_poses: Vec<(usize, Pose)> = fusion
            .fused_frames
            .iter()
            .copied()
            .filter(|&t| t < frames.len())
            .map(|t| (t, frames[t].pose.clone()))
            .collect();
        let gt = stage!(
            "evaluate",
            visible_static_points_at(&spec, &fused_poses, &k, cfg.fps)
        );
        if gt.is_empty() {
            None
        } else {
            Some(stage!(
                "evaluate",
                eval::chamfer(&static_cloud.positions, &gt)
            ))
        }
    } else {
        None
    };

    let report = stage!("evaluate", MetricReport::from_frames(per_frame, chamfer));
    stage!("evaluate", report.save_json(&dir.join("metrics.json")));
    let mut files = vec!["evaluate/metrics.json".to_string()];

    // Segmentation accuracy against the simulator's flags, for every
    // frame the reconstruct stage segmented.
    let mut seg_frames = Vec::new();
    let mut total_agreed = 0usize;
    let mut total_compared = 0usize;
    for t in 0..frames.len().saturating_sub(1) {
        let seg_path = rec.join(seg_json_name(t));
        if !seg_path.is_file() {
            continue;
        }
        let record: SegRecord = read_json(STAGE, &seg_path)?;
        let gtdyn = stage!("evaluate", frame_io::load_gt_dynamic(&sim, t))
            .unwrap_or_else(|| Mask::empty(record.width, record.height));
        let oracle = frames[t].depth.mask();
        let (mut agreed, mut compared, mut unknown) = (0usize, 0usize, 0usize);
        for i in 0..record.labels.len() {
            if !oracle.data[i] {
                continue;
            }
            compared += 1;
            match record.labels[i] {
                SegLabel::Unknown => unknown += 1,
                SegLabel::Dynamic if gtdyn.data[i] => agreed += 1,
                SegLabel::Static if !gtdyn.data[i] => agreed += 1,
                _ => {}
            }
        }
        total_agreed += agreed;
        total_compared += compared;
        seg_frames.push(SegFrameReport {
            frame: t,
            agreement: if compared > 0 {
                agreed as f64 / compared as f64
            } else {
                0.0
            },
            agreed,
            compared,
            unknown,
        });
    }
    let seg_report = SegReport {
        per_frame: seg_frames,
        pooled_agreement: (total_compared > 0)
            .then(|| total_agreed as f64 / total_compared as f64),
        total_compared,
    };
    write_json(STAGE, &dir.join("seg_report.json"), &seg_report)?;
    files.push("evaluate/seg_report.json".to_string());

    Ok(files)
}

pub fn run_evaluate(cfg: &Config, out: &Path) -> Result<Vec<String>, CliError> {
    let dir = stage_dir(out, "evaluate")?;
    match cfg.evaluate.mode {
        EvalMode::Identity => evaluate_identity(out, &dir),
        EvalMode::Reconstruction => evaluate_reconstruction(cfg, out, &dir),
    }
}

// ---------------------------------------------------------------------
// classify
// ---------------------------------------------------------------------

pub fn run_classify(cfg: &Config, out: &Path) -> Result<Vec<String>, CliError> {
    const STAGE: &str = "classify";
    let dir = stage_dir(out, STAGE)?;
    let dataset = synthetic_motion_dataset(cfg.classify.per_class, cfg.seed);
    let (classifier, stats) = stage!(
        "classify",
        train_episodic(&dataset, &cfg.classify.train, cfg.seed)
    );
    stage!("classify", classifier.save_checkpoint(&dir.join("classifier.json")));
    write_json(STAGE, &dir.join("training_stats.json"), &stats)?;
    let mut files = vec![
        format!("{STAGE}/classifier.json"),
        format!("{STAGE}/training_stats.json"),
    ];

    let mut results = Vec::new();
    let mut correct = 0usize;
    if cfg.classify.eval_per_class > 0 {
        // Held-out queries from the same generator, different stream.
        let eval_seed = cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let heldout = synthetic_motion_dataset(cfg.classify.eval_per_class, eval_seed);
        for (i, features) in heldout.features.iter().enumerate() {
            let truth = MotionType::from_index(heldout.labels[i])
                .expect("synthetic labels index the motion set");
            let prediction = classifier.classify_features(features);
            let is_correct = prediction.motion == truth;
            correct += usize::from(is_correct);
            results.push(ClassifyResult {
                id: format!("synthetic-{}-{}", truth.label(), i),
                truth: Some(truth),
                predicted: prediction.motion,
                correct: Some(is_correct),
            });
        }
    }
    let accuracy = (!results.is_empty()).then(|| correct as f64 / results.len() as f64);

    if let Some(input) = &cfg.classify.input {
        let image = stage!("classify", RgbImage::load_png(input));
        let prediction = stage!("classify", classifier.classify(&image));
        results.push(ClassifyResult {
            id: input.display().to_string(),
            truth: None,
            predicted: prediction.motion,
            correct: None,
        });
    }

    let record = ClassificationRecord {
        extractor: EXTRACTOR_ID.to_string(),
        seed: cfg.seed,
        accuracy,
        results,
    };
    write_json(STAGE, &dir.join("classification.json"), &record)?;
    files.push(format!("{STAGE}/classification.json"));
    Ok(files)
}
