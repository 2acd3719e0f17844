//! Few-shot camera-motion classification: a fixed hand-crafted feature
//! extractor feeding a linear softmax head trained on episodes
//! (support/query splits) with feature dropout, Adam, and a stepped
//! learning-rate schedule. All randomness flows through one seeded
//! ChaCha8 stream, so training is bit-reproducible.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::img::{ImgError, RgbImage};
use crate::optim::Adam;
use crate::trajectory::MotionType;

/// Identifier of the feature extractor baked into checkpoints; a loaded
/// head only runs on the extractor it was trained with.
pub const EXTRACTOR_ID: &str = "blockluma8x8-gradhist8-v1";

/// 8x8 block-average luma (64) + 8-bin horizontal and vertical gradient
/// histograms (8 + 8).
pub const FEATURE_DIM: usize = 80;

/// Number of motion classes (one per supported camera motion).
pub const CLASS_COUNT: usize = MotionType::ALL.len();

#[derive(Debug, Error)]
pub enum FewshotError {
    #[error("image must be at least 8x8 (got {width}x{height})")]
    TooSmallImage { width: usize, height: usize },
    #[error("invalid config: {what}")]
    InvalidConfig { what: String },
    #[error("class {class} has {have} samples but an episode needs {need}")]
    DatasetTooSmall {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("unknown class label {label:?}")]
    UnknownLabel { label: String },
    #[error("bad checkpoint: {what}")]
    BadCheckpoint { what: String },
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FewshotError>;

/// Fixed 80-dim descriptor: Rec.601 luma averaged over an 8x8 block grid
/// (row-major), then 8-bin histograms of horizontal and vertical forward
/// differences, bins uniform over [-1, 1] (a zero gradient lands in bin
/// 4), each histogram normalized to sum 1.
pub fn extract_features(img: &RgbImage) -> Result<Vec<f64>> {
    let (w, h) = (img.width, img.height);
    if w < 8 || h < 8 {
        return Err(FewshotError::TooSmallImage {
            width: w,
            height: h,
        });
    }
    let luma = img.luma_plane();
    let mut features = Vec::with_capacity(FEATURE_DIM);

    for bi in 0..8 {
        let r0 = bi * h / 8;
        let r1 = (bi + 1) * h / 8;
        for bj in 0..8 {
            let c0 = bj * w / 8;
            let c1 = (bj + 1) * w / 8;
            let mut sum = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += luma[r * w + c];
                }
            }
            features.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }

    let bin_of = |g: f64| (((g + 1.0) / 2.0 * 8.0).floor() as i64).clamp(0, 7) as usize;
    let mut hist_x = [0.0f64; 8];
    let mut count_x = 0usize;
    for r in 0..h {
        for c in 0..w - 1 {
            hist_x[bin_of(luma[r * w + c + 1] - luma[r * w + c])] += 1.0;
            count_x += 1;
        }
    }
    let mut hist_y = [0.0f64; 8];
    let mut count_y = 0usize;
    for r in 0..h - 1 {
        for c in 0..w {
            hist_y[bin_of(luma[(r + 1) * w + c] - luma[r * w + c])] += 1.0;
            count_y += 1;
        }
    }
    features.extend(hist_x.iter().map(|&v| v / count_x as f64));
    features.extend(hist_y.iter().map(|&v| v / count_y as f64));
    debug_assert_eq!(features.len(), FEATURE_DIM);
    Ok(features)
}

/// Labeled feature set. Labels index [`MotionType::ALL`].
#[derive(Debug, Clone)]
pub struct MotionDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl MotionDataset {
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() {
            return Err(FewshotError::InvalidConfig {
                what: format!(
                    "{} feature rows but {} labels",
                    self.features.len(),
                    self.labels.len()
                ),
            });
        }
        if self.features.is_empty() {
            return Err(FewshotError::InvalidConfig {
                what: "empty dataset".to_string(),
            });
        }
        let d = self.features[0].len();
        if !self.features.iter().all(|f| f.len() == d) {
            return Err(FewshotError::InvalidConfig {
                what: "ragged feature rows".to_string(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(FewshotError::InvalidConfig {
                what: format!("label {bad} out of range for {} classes", self.class_count),
            });
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// JSON manifest of an on-disk image dataset: image paths are relative
/// to the manifest file, labels are motion names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub samples: Vec<ManifestSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub path: String,
    pub label: String,
}

/// Loads a manifest, reads every image, and extracts features.
pub fn load_image_dataset(manifest_path: &std::path::Path) -> Result<MotionDataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(std::path::Path::new("."));
    for class in &manifest.classes {
        if class.parse::<MotionType>().is_err() {
            return Err(FewshotError::UnknownLabel {
                label: class.clone(),
            });
        }
    }
    let mut features = Vec::with_capacity(manifest.samples.len());
    let mut labels = Vec::with_capacity(manifest.samples.len());
    for sample in &manifest.samples {
        if !manifest.classes.contains(&sample.label) {
            return Err(FewshotError::UnknownLabel {
                label: sample.label.clone(),
            });
        }
        let motion: MotionType =
            sample
                .label
                .parse()
                .map_err(|_| FewshotError::UnknownLabel {
                    label: sample.label.clone(),
                })?;
        let img = RgbImage::load_png(&base.join(&sample.path))?;
        features.push(extract_features(&img)?);
        labels.push(motion.index());
    }
    let dataset = MotionDataset {
        features,
        labels,
        class_count: CLASS_COUNT,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Linear softmax head: logits = W x + b, weights stored row-major
/// (class-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub feature_dim: usize,
    pub class_count: usize,
    /// `class_count * feature_dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(feature_dim: usize, class_count: usize) -> Self {
        Self {
            feature_dim,
            class_count,
            weights: vec![0.0; class_count * feature_dim],
            bias: vec![0.0; class_count],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.feature_dim, "feature length mismatch");
        let mut out = self.bias.clone();
        for c in 0..self.class_count {
            let row = &self.weights[c * self.feature_dim..(c + 1) * self.feature_dim];
            out[c] += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
        out
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.weights.clone();
        flat.extend_from_slice(&self.bias);
        flat
    }

    fn from_flat(&mut self, flat: &[f64]) {
        let nw = self.weights.len();
        self.weights.copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..]);
    }
}

/// Numerically stable softmax; the result sums to 1.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverted dropout: each feature is zeroed with probability `p`,
/// survivors are scaled by 1/(1-p) so the expectation is unchanged.
/// `p = 0` returns the input as is.
pub fn dropout_features(x: &[f64], p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if p <= 0.0 {
        return x.to_vec();
    }
    let keep = 1.0 - p;
    x.iter()
        .map(|&v| {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                v / keep
            }
        })
        .collect()
}

/// One episode: dataset row indices for the support and query sets.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Distinct classes drawn per episode (N-way).
    pub classes_per_episode: usize,
    /// Support examples per class (K-shot).
    pub shots: usize,
    /// Query examples per class.
    pub queries: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            classes_per_episode: 8,
            shots: 5,
            queries: 4,
        }
    }
}

/// Draws an episode: `classes_per_episode` distinct classes, then
/// `shots + queries` distinct rows per class (first the support, then
/// the query split).
pub fn sample_episode(
    dataset: &MotionDataset,
    cfg: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if cfg.classes_per_episode == 0 || cfg.classes_per_episode > dataset.class_count {
        return Err(FewshotError::InvalidConfig {
            what: format!(
                "classes_per_episode {} not in 1..={}",
                cfg.classes_per_episode, dataset.class_count
            ),
        });
    }
    if cfg.shots == 0 {
        return Err(FewshotError::InvalidConfig {
            what: "shots must be positive".to_string(),
        });
    }
    let need = cfg.shots + cfg.queries;
    let classes = index::sample(rng, dataset.class_count, cfg.classes_per_episode);
    let mut support = Vec::with_capacity(cfg.classes_per_episode * cfg.shots);
    let mut query = Vec::with_capacity(cfg.classes_per_episode * cfg.queries);
    for class in classes.iter() {
        let rows = dataset.indices_of_class(class);
        if rows.len() < need {
            return Err(FewshotError::DatasetTooSmall {
                class,
                have: rows.len(),
                need,
            });
        }
        let picked = index::sample(rng, rows.len(), need);
        for (i, pick) in picked.iter().enumerate() {
            if i < cfg.shots {
                support.push(rows[pick]);
            } else {
                query.push(rows[pick]);
            }
        }
    }
    Ok(Episode { support, query })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Initial Adam step size.
    pub lr: f64,
    /// Epochs between learning-rate cuts.
    pub lr_decay_every: usize,
    /// Multiplier applied at each cut.
    pub lr_decay: f64,
    /// Feature dropout probability during updates.
    pub dropout: f64,
    pub episode: EpisodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            episodes_per_epoch: 20,
            lr: 1e-3,
            lr_decay_every: 5,
            lr_decay: 0.5,
            dropout: 0.5,
            episode: EpisodeConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(FewshotError::InvalidConfig {
                what: what.to_string(),
            })
        };
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return bad("epochs and episodes_per_epoch must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Step size used during `epoch` (0-based): the base rate halved (or
    /// whatever `lr_decay` is) every `lr_decay_every` epochs.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Per-epoch training telemetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_query_accuracy: f64,
}

/// Trained classifier: the linear head plus the identity of the
/// extractor its weights assume.
#[derive(Debug, Clone)]
pub struct MotionClassifier {
    pub head: LinearHead,
    pub extractor_id: String,
    pub seed: u64,
}

/// Classification outcome: the winning motion and the full softmax
/// distribution in [`MotionType::ALL`] order.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub motion: MotionType,
    pub probabilities: Vec<f64>,
}

impl MotionClassifier {
    pub fn classify(&self, img: &RgbImage) -> Result<Prediction> {
        let features = extract_features(img)?;
        Ok(self.classify_features(&features))
    }

    pub fn classify_features(&self, features: &[f64]) -> Prediction {
        let probabilities = softmax(&self.head.logits(features));
        let motion = MotionType::from_index(argmax(&probabilities))
            .expect("head class count matches the motion set");
        Prediction {
            motion,
            probabilities,
        }
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let record = CheckpointRecord {
            format: CHECKPOINT_FORMAT.to_string(),
            extractor: self.extractor_id.clone(),
            feature_dim: self.head.feature_dim,
            class_count: self.head.class_count,
            classes: MotionType::ALL.iter().map(|m| m.label().to_string()).collect(),
            seed: self.seed,
            weights: self.head.weights.clone(),
            bias: self.head.bias.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&record)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let record: CheckpointRecord =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let bad = |what: String| Err(FewshotError::BadCheckpoint { what });
        if record.format != CHECKPOINT_FORMAT {
            return bad(format!("unsupported format {:?}", record.format));
        }
        if record.extractor != EXTRACTOR_ID {
            return bad(format!(
                "checkpoint was trained with extractor {:?}, this build provides {EXTRACTOR_ID:?}",
                record.extractor
            ));
        }
        let expected_classes: Vec<String> = MotionType::ALL
            .iter()
            .map(|m| m.label().to_string())
            .collect();
        if record.classes != expected_classes {
            return bad("class list does not match the supported motions".to_string());
        }
        if record.class_count != record.classes.len() {
            return bad("class_count disagrees with the class list".to_string());
        }
        if record.weights.len() != record.class_count * record.feature_dim
            || record.bias.len() != record.class_count
        {
            return bad("weight shapes disagree with the declared dimensions".to_string());
        }
        if !record
            .weights
            .iter()
            .chain(&record.bias)
            .all(|v| v.is_finite())
        {
            return bad("non-finite parameters".to_string());
        }
        Ok(Self {
            head: LinearHead {
                feature_dim: record.feature_dim,
                class_count: record.class_count,
                weights: record.weights,
                bias: record.bias,
            },
            extractor_id: record.extractor,
            seed: record.seed,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "motion-classifier-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    format: String,
    extractor: String,
    feature_dim: usize,
    class_count: usize,
    classes: Vec<String>,
    seed: u64,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Episodic training. Every update takes the mean cross-entropy over the
/// joint support + query batch with feature dropout on; the reported
/// accuracy is measured on the query split after the step with dropout
/// off. Returns the trained classifier and per-epoch telemetry.
pub fn train_episodic(
    dataset: &MotionDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MotionClassifier, Vec<EpochStats>)> {
    cfg.validate()?;
    dataset.validate()?;
    let d = dataset.feature_dim();
    let mut head = LinearHead::zeros(d, dataset.class_count);
    let mut params = head.to_flat();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        adam.set_lr(cfg.lr_at_epoch(epoch));
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for _ in 0..cfg.episodes_per_epoch {
            let episode = sample_episode(dataset, &cfg.episode, &mut rng)?;
            head.from_flat(&params);

            let batch: Vec<usize> = episode
                .support
                .iter()
                .chain(&episode.query)
                .copied()
                .collect();
            let mut grads = vec![0.0; params.len()];
            let mut loss = 0.0;
            for &row in &batch {
                let x = dropout_features(&dataset.features[row], cfg.dropout, &mut rng);
                let probs = softmax(&head.logits(&x));
                let label = dataset.labels[row];
                loss += -probs[label].max(1e-300).ln();
                for c in 0..head.class_count {
                    let delta = probs[c] - if c == label { 1.0 } else { 0.0 };
                    let wrow = &mut grads[c * d..(c + 1) * d];
                    for (g, xi) in wrow.iter_mut().zip(&x) {
                        *g += delta * xi;
                    }
                    grads[head.weights.len() + c] += delta;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            loss *= scale;
            adam.step(&mut params, &grads);
            loss_sum += loss;

            // Query accuracy after the update, dropout off.
            head.from_flat(&params);
            let correct = episode
                .query
                .iter()
                .filter(|&&row| {
                    argmax(&head.logits(&dataset.features[row])) == dataset.labels[row]
                })
                .count();
            if !episode.query.is_empty() {
                acc_sum += correct as f64 / episode.query.len() as f64;
            }
        }
        stats.push(EpochStats {
            epoch,
            lr: adam.lr(),
            mean_loss: loss_sum / cfg.episodes_per_epoch as f64,
            mean_query_accuracy: acc_sum / cfg.episodes_per_epoch as f64,
        });
    }

    head.from_flat(&params);
    Ok((
        MotionClassifier {
            head,
            extractor_id: EXTRACTOR_ID.to_string(),
            seed,
        },
        stats,
    ))
}

/// Sinusoidal grating whose orientation and frequency are functions of
/// the class index; `phase` shifts the pattern, `amplitude` scales the
/// contrast around mid-gray.
pub fn synthetic_grating_image(
    class: usize,
    size: usize,
    phase: f64,
    amplitude: f64,
) -> RgbImage {
    let theta = std::f64::consts::PI * class as f64 / 8.0;
    let cycles = 2.0 + (class % 4) as f64;
    let (dx, dy) = (theta.cos(), theta.sin());
    RgbImage::from_fn(size, size, |x, y| {
        let t = (x as f64 * dx + y as f64 * dy) / size as f64;
        let v = 0.5 + amplitude * (std::f64::consts::TAU * cycles * t + phase).sin();
        let v = v.clamp(0.0, 1.0);
        [v, v, v]
    })
}

/// Deterministic synthetic dataset: `per_class` grating images for each
/// of the eight motion classes, rendered at 32x32 and passed through the
/// feature extractor.
pub fn synthetic_motion_dataset(per_class: usize, seed: u64) -> MotionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(per_class * CLASS_COUNT);
    let mut labels = Vec::with_capacity(per_class * CLASS_COUNT);
    for class in 0..CLASS_COUNT {
        for _ in 0..per_class {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amplitude = rng.gen_range(0.35..0.45);
            let img = synthetic_grating_image(class, 32, phase, amplitude);
            features.push(extract_features(&img).expect("32x32 is large enough"));
            labels.push(class);
        }
    }
    MotionDataset {
        features,
        labels,
        class_count: CLASS_COUNT,
    }
}
