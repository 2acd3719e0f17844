//! Toolkit for turning a single posed view into a 4D point-based scene:
//! canonical SE(3) camera trajectories, an oracle scene simulator that
//! stands in for a learned view generator, camera-aware back-projection
//! and fusion with a small cross-attention feature field, a few-shot
//! motion classifier, and the metrics used to score all of it.

pub mod eval;
pub mod fewshot;
pub mod geometry;
pub mod img;
pub mod optim;
pub mod recon;
pub mod scenesim;
pub mod trajectory;

pub use geometry::{DepthMap, Intrinsics, PointCloud, Pose};
pub use img::{Mask, RgbImage};
pub use trajectory::MotionType;
