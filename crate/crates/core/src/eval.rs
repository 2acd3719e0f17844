//! Image- and geometry-level evaluation: masked PSNR, masked luma SSIM,
//! and symmetric Chamfer distance with an exact nearest-neighbor
//! kd-tree. All metrics are deterministic functions of their inputs.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::img::{Mask, RgbImage};

/// PSNR ceiling (dB); a zero-MSE comparison reports exactly this.
pub const PSNR_MAX: f64 = 99.0;

/// SSIM window edge length in pixels.
pub const SSIM_WINDOW: usize = 8;

/// Minimum valid pixels for an SSIM window to count (of 64).
pub const SSIM_MIN_VALID: usize = 48;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {what}")]
    ShapeMismatch { what: String },
    #[error("empty input: {what}")]
    EmptyInput { what: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_shapes(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(EvalError::ShapeMismatch {
            what: format!(
                "images are {}x{} and {}x{}",
                a.width, a.height, b.width, b.height
            ),
        });
    }
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height {
            return Err(EvalError::ShapeMismatch {
                what: format!(
                    "mask is {}x{} but images are {}x{}",
                    m.width, m.height, a.width, a.height
                ),
            });
        }
    }
    Ok(())
}

/// Mean squared error over the masked pixels (all three channels),
/// together with the number of pixels compared.
pub fn mse(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<(f64, usize)> {
    check_shapes(a, b, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for idx in 0..a.data.len() {
        if mask.map_or(true, |m| m.data[idx]) {
            for c in 0..3 {
                let e = a.data[idx][c] - b.data[idx][c];
                sum += e * e;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(EvalError::EmptyInput {
            what: "mask excludes every pixel".to_string(),
        });
    }
    Ok((sum / (3 * count) as f64, count))
}

/// Peak signal-to-noise ratio in dB for unit-range images, clamped to
/// `[0, PSNR_MAX]`; identical inputs report `PSNR_MAX`.
pub fn psnr(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<f64> {
    let (mse, _) = mse(a, b, mask)?;
    if mse <= 0.0 {
        return Ok(PSNR_MAX);
    }
    Ok((10.0 * (1.0 / mse).log10()).clamp(0.0, PSNR_MAX))
}

/// Mean structural similarity over luma. Every fully-inside 8x8 window
/// contributes if at least [`SSIM_MIN_VALID`] of its pixels are masked
/// valid; window statistics run over the valid pixels only and share
/// one code path for variance and covariance, so comparing an image
/// with itself yields exactly 1.0.
pub fn ssim(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<f64> {
    check_shapes(a, b, mask)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::ShapeMismatch {
            what: format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"),
        });
    }
    let la = a.luma_plane();
    let lb = b.luma_plane();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut xs = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
            let mut ys = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
            let mut n = 0usize;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let idx = (y0 + dy) * w + x0 + dx;
                    if mask.map_or(true, |m| m.data[idx]) {
                        xs[n] = la[idx];
                        ys[n] = lb[idx];
                        n += 1;
                    }
                }
            }
            if n < SSIM_MIN_VALID {
                continue;
            }
            let inv = 1.0 / n as f64;
            let mu_x = xs[..n].iter().sum::<f64>() * inv;
            let mu_y = ys[..n].iter().sum::<f64>() * inv;
            // One code path for all second moments: centered products.
            let moment = |p: &[f64], mp: f64, q: &[f64], mq: f64| {
                p.iter()
                    .zip(q)
                    .map(|(&pi, &qi)| (pi - mp) * (qi - mq))
                    .sum::<f64>()
                    * inv
            };
            let var_x = moment(&xs[..n], mu_x, &xs[..n], mu_x);
            let var_y = moment(&ys[..n], mu_y, &ys[..n], mu_y);
            let cov = moment(&xs[..n], mu_x, &ys[..n], mu_y);
            let num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
            let den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
            total += num / den;
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(EvalError::EmptyInput {
            what: "no SSIM window has enough valid pixels".to_string(),
        });
    }
    Ok(total / windows as f64)
}

/// Exact nearest-neighbor search over a fixed point set via a
/// median-split kd-tree (axes cycle x, y, z).
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<KdNode>,
    root: i32,
}

struct KdNode {
    /// Index into `points`.
    point: usize,
    axis: usize,
    left: i32,
    right: i32,
}

impl KdTree {
    /// Returns `None` for an empty set.
    pub fn build(points: &[Vector3<f64>]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let mut tree = Self {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: -1,
        };
        let mut order: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build_rec(&mut order, 0);
        Some(tree)
    }

    fn build_rec(&mut self, order: &mut [usize], depth: usize) -> i32 {
        if order.is_empty() {
            return -1;
        }
        let axis = depth % 3;
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&i, &j| {
            self.points[i][axis]
                .partial_cmp(&self.points[j][axis])
                .expect("finite coordinates")
        });
        let point = order[mid];
        let node_index = self.nodes.len() as i32;
        self.nodes.push(KdNode {
            point,
            axis,
            left: -1,
            right: -1,
        });
        // Split the slice around the median before recursing.
        let (lo, hi) = order.split_at_mut(mid);
        let hi = &mut hi[1..];
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(hi, depth + 1);
        self.nodes[node_index as usize].left = left;
        self.nodes[node_index as usize].right = right;
        node_index
    }

    /// Index and Euclidean distance of the closest stored point.
    pub fn nearest(&self, query: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY); // (point index, dist^2)
        self.nearest_rec(self.root, query, &mut best);
        (best.0, best.1.sqrt())
    }

    fn nearest_rec(&self, node: i32, query: &Vector3<f64>, best: &mut (usize, f64)) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point];
        let d2 = (p - query).norm_squared();
        if d2 < best.1 {
            *best = (n.point, d2);
        }
        let delta = query[n.axis] - p[n.axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.nearest_rec(near, query, best);
        if delta * delta < best.1 {
            self.nearest_rec(far, query, best);
        }
    }
}

/// Symmetric Chamfer distance in meters:
/// `0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|)`.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    let tree_a = KdTree::build(a).ok_or_else(|| EvalError::EmptyInput {
        what: "first point set is empty".to_string(),
    })?;
    let tree_b = KdTree::build(b).ok_or_else(|| EvalError::EmptyInput {
        what: "second point set is empty".to_string(),
    })?;
    let mean_ab =
        a.iter().map(|p| tree_b.nearest(p).1).sum::<f64>() / a.len() as f64;
    let mean_ba =
        b.iter().map(|p| tree_a.nearest(p).1).sum::<f64>() / b.len() as f64;
    Ok(0.5 * (mean_ab + mean_ba))
}

/// Per-frame image metrics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Pixels the comparison actually covered.
    pub compared_pixels: usize,
}

/// Evaluation artifact written by the pipeline's evaluate stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    /// Mean of the per-frame PSNR values.
    pub mean_psnr: f64,
    /// Mean of the per-frame SSIM values.
    pub mean_ssim: f64,
    /// Static-geometry Chamfer distance, when geometry was evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
}

impl MetricReport {
    /// Builds the report from per-frame metrics; means are averages of
    /// the per-frame values.
    pub fn from_frames(per_frame: Vec<FrameMetrics>, chamfer: Option<f64>) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(EvalError::EmptyInput {
                what: "no frames were evaluated".to_string(),
            });
        }
        let n = per_frame.len() as f64;
        let mean_psnr = per_frame.iter().map(|f| f.psnr).sum::<f64>() / n;
        let mean_ssim = per_frame.iter().map(|f| f.ssim).sum::<f64>() / n;
        Ok(Self {
            per_frame,
            mean_psnr,
            mean_ssim,
            chamfer,
        })
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
