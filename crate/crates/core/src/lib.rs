//! Decomposed SSIM losses for photometric depth learning.
//!
//! The crate provides luminance/contrast/structure statistics over box
//! windows, the multiplicative and additive SSIM loss forms with exact
//! gradients, inverse warping with a min-reprojection photometric loss and
//! edge-aware smoothness, pixel-shuffle upsampling, and a small harness that
//! fits a depth grid to synthetic two-view scenes.

pub mod error;
pub mod fit;
pub mod geometry;
pub mod grad;
pub mod image;
pub mod num;
pub mod pfm;
pub mod resample;
pub mod ssim;
pub mod stats;

pub use error::{Error, Result};
pub use grad::{fd_gradient, grad_loss, GradientPair, LossSetup};
pub use image::{load_image, Image};
pub use ssim::{LossKind, LossReport, SsimConfig};
pub use stats::{window_stats, Padding, WindowStatsMap};
pub use fit::{evaluate_depth, fit_depth, render_scene, DepthMetrics, FitConfig, SceneSpec};
pub use geometry::{photometric_loss, project, smoothness_loss, warp, CameraIntrinsics, DepthMap, Pose, WarpResult};
pub use resample::{pixel_shuffle, upsample_bilinear, upsample_nearest, ChannelStack};
