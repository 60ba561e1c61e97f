//! Pinhole projection, inverse warping, the min-reprojection photometric
//! loss and edge-aware disparity smoothness.
//!
//! Pixel coordinate `(0, 0)` is the center of the top-left pixel; `u` runs
//! along columns and `v` along rows.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::backward;
use crate::image::Image;
use crate::num::{compensated_sum, sign_or_zero};
use crate::ssim::{channel_mean, sample_loss, LossKind, LossReport, SsimConfig};
use crate::stats::tap_table;

/// Projected depths at or below this are treated as behind the camera.
pub const MIN_PROJECTED_DEPTH: f64 = 1e-9;

/// Coordinates this close outside the image still sample the border, so
/// round-off in reprojection does not drop edge pixels.
pub const BOUNDS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// Principal point at the image center.
    pub fn centered(focal: f64, height: usize, width: usize) -> Result<Self> {
        CameraIntrinsics::new(focal, focal, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Argument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Argument("principal point must be finite".into()));
        }
        Ok(())
    }

    /// `K^-1 [u, v, 1]`
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let k: CameraIntrinsics = read_json(path.as_ref())?;
        k.validate()?;
        Ok(k)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    rotation: [f64; 9],
    translation: [f64; 3],
}

/// Rigid motion `X' = R X + t` mapping points of the target camera frame
/// into the source camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseFile", into = "PoseFile")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl TryFrom<PoseFile> for Pose {
    type Error = Error;

    fn try_from(raw: PoseFile) -> Result<Self> {
        Pose::new(
            Matrix3::from_row_slice(&raw.rotation),
            Vector3::from_column_slice(&raw.translation),
        )
    }
}

impl From<Pose> for PoseFile {
    fn from(p: Pose) -> Self {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = p.rotation[(r, c)];
            }
        }
        PoseFile {
            rotation,
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9 && (det - 1.0).abs() <= 1e-9) {
            return Err(Error::Argument(format!(
                "rotation is not orthonormal with det +1 (orthogonality error {ortho:e}, det {det})"
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("translation must be finite".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(tx: f64, ty: f64, tz: f64) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::new(tx, ty, tz),
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner();
        Pose {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Strictly positive per-pixel depth in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || depth.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} depth values do not fill {height}x{width}",
                depth.len()
            )));
        }
        if let Some(i) = depth.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Domain(format!("depth {} at pixel {i} is not positive", depth[i])));
        }
        Ok(DepthMap { height, width, depth })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        DepthMap::new(height, width, vec![depth; height * width])
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::Dimension(format!("depth maps have one channel, got {}", img.channels())));
        }
        DepthMap::new(img.height(), img.width(), img.data().to_vec())
    }

    pub fn to_image(&self) -> Image {
        Image::new(self.height, self.width, 1, self.depth.clone()).expect("valid shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    /// `1 / depth`
    pub fn disparity(&self) -> Vec<f64> {
        self.depth.iter().map(|d| 1.0 / d).collect()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        DepthMap::new(self.height, self.width, self.depth.iter().map(|d| d * factor).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        DepthMap::from_image(&crate::pfm::read_pfm(path)?)
    }
}

/// A projected pixel: continuous coordinates and depth in the source frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl Projected {
    pub fn in_front(&self) -> bool {
        self.z > MIN_PROJECTED_DEPTH
    }
}

/// Back-projects `(u, v)` at `depth`, moves the point by `pose` and projects
/// it again. Points behind the camera come back with `z <= 1e-9` and
/// meaningless coordinates.
pub fn project(u: f64, v: f64, depth: f64, k: &CameraIntrinsics, pose: &Pose) -> Result<Projected> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::Argument(format!("depth must be positive, got {depth}")));
    }
    Ok(project_point(&pose.transform(&(k.ray(u, v) * depth)), k))
}

#[inline]
fn project_point(p: &Vector3<f64>, k: &CameraIntrinsics) -> Projected {
    Projected {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
        z: p.z,
    }
}

/// Bilinear value at continuous `(u, v)` and its partials along `u` and `v`,
/// per channel, written to `out`. Returns false outside `[0, W-1] x [0, H-1]`.
#[inline]
pub fn bilinear_at(src: &Image, u: f64, v: f64, out: &mut [(f64, f64, f64)]) -> bool {
    let (h, w, ch) = src.shape();
    let (umax, vmax) = ((w - 1) as f64, (h - 1) as f64);
    let tol = BOUNDS_TOLERANCE;
    if !(u >= -tol && v >= -tol && u <= umax + tol && v <= vmax + tol) {
        return false;
    }
    let (u, v) = (u.clamp(0.0, umax), v.clamp(0.0, vmax));
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    for (c, slot) in out.iter_mut().enumerate().take(ch) {
        let p00 = src.get(y0, x0, c);
        let p01 = src.get(y0, x1, c);
        let p10 = src.get(y1, x0, c);
        let p11 = src.get(y1, x1, c);
        let top = p00 + fx * (p01 - p00);
        let bottom = p10 + fx * (p11 - p10);
        let value = top + fy * (bottom - top);
        let du = if x1 != x0 { (1.0 - fy) * (p01 - p00) + fy * (p11 - p10) } else { 0.0 };
        let dv = if y1 != y0 { bottom - top } else { 0.0 };
        *slot = (value, du, dv);
    }
    true
}

/// Dense coordinate grid: sample `i` reads source location `(u[i], v[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Bilinear samples with the exact derivative of the interpolated surface
/// along both coordinates. Out-of-bounds samples are 0 and flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSamples {
    pub values: Image,
    pub d_du: Image,
    pub d_dv: Image,
    pub valid: Vec<bool>,
}

pub fn bilinear_sample(src: &Image, coords: &CoordGrid) -> Result<BilinearSamples> {
    let n = coords.height * coords.width;
    if coords.u.len() != n || coords.v.len() != n {
        return Err(Error::Dimension("coordinate grid length does not match its shape".into()));
    }
    let ch = src.channels();
    let mut values = Image::filled(coords.height, coords.width, ch, 0.0);
    let mut d_du = values.clone();
    let mut d_dv = values.clone();
    let mut valid = vec![false; n];
    let mut buf = vec![(0.0, 0.0, 0.0); ch];
    for i in 0..n {
        if bilinear_at(src, coords.u[i], coords.v[i], &mut buf) {
            valid[i] = true;
            for (c, &(val, gu, gv)) in buf.iter().enumerate() {
                values.data_mut()[i * ch + c] = val;
                d_du.data_mut()[i * ch + c] = gu;
                d_dv.data_mut()[i * ch + c] = gv;
            }
        }
    }
    Ok(BilinearSamples {
        values,
        d_du,
        d_dv,
        valid,
    })
}

/// A source view resampled into the target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: Image,
    /// Source coordinate in bounds and in front of the camera.
    pub valid_mask: Vec<bool>,
    pub coords: CoordGrid,
    /// Derivative of the warped value with respect to the log-depth of its
    /// pixel, per sample.
    pub d_dlogdepth: Image,
}

impl WarpResult {
    pub fn valid_fraction(&self) -> f64 {
        self.valid_mask.iter().filter(|&&v| v).count() as f64 / self.valid_mask.len() as f64
    }
}

/// Synthesizes the target view from `src` using target depth and the
/// target-to-source pose.
pub fn warp(src: &Image, depth: &DepthMap, k: &CameraIntrinsics, pose: &Pose) -> Result<WarpResult> {
    let (h, w, ch) = src.shape();
    if (depth.height(), depth.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "depth {}x{} does not match image {h}x{w}",
            depth.height(),
            depth.width()
        )));
    }
    k.validate()?;
    let n = h * w;
    let mut coords = CoordGrid {
        height: h,
        width: w,
        u: vec![f64::NAN; n],
        v: vec![f64::NAN; n],
    };
    let mut image = Image::filled(h, w, ch, 0.0);
    let mut d_dlogdepth = image.clone();
    let mut valid_mask = vec![false; n];
    let mut buf = vec![(0.0, 0.0, 0.0); ch];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = depth.get(y, x);
            let ray = k.ray(x as f64, y as f64);
            let p = pose.transform(&(ray * d));
            let proj = project_point(&p, k);
            if !proj.in_front() {
                continue;
            }
            coords.u[i] = proj.u;
            coords.v[i] = proj.v;
            if !bilinear_at(src, proj.u, proj.v, &mut buf) {
                continue;
            }
            valid_mask[i] = true;
            // d p / d log(depth) = depth * R * ray
            let dp = pose.rotation() * ray * d;
            let du = k.fx * (dp.x * p.z - p.x * dp.z) / (p.z * p.z);
            let dv = k.fy * (dp.y * p.z - p.y * dp.z) / (p.z * p.z);
            for (c, &(val, gu, gv)) in buf.iter().enumerate() {
                image.data_mut()[i * ch + c] = val;
                d_dlogdepth.data_mut()[i * ch + c] = gu * du + gv * dv;
            }
        }
    }
    Ok(WarpResult {
        image,
        valid_mask,
        coords,
        d_dlogdepth,
    })
}

/// Pixels whose whole residual window lies on valid samples.
fn window_valid(mask: &[bool], h: usize, w: usize, kind: LossKind, cfg: &SsimConfig) -> Vec<bool> {
    if kind == LossKind::Mae || cfg.window == 1 {
        return mask.to_vec();
    }
    let rows = tap_table(h, cfg.window, cfg.padding);
    let cols = tap_table(w, cfg.window, cfg.padding);
    let win = cfg.window;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = rows[y * win..(y + 1) * win]
                .iter()
                .all(|&sy| cols[x * win..(x + 1) * win].iter().all(|&sx| mask[sy * w + sx]));
        }
    }
    out
}

/// Channel-averaged residual of one synthesized view together with the
/// pixels where it is defined.
struct ViewResidual {
    per_pixel: Vec<f64>,
    valid: Vec<bool>,
}

fn view_residual(target: &Image, warped: &WarpResult, kind: LossKind, cfg: &SsimConfig) -> Result<ViewResidual> {
    let (h, w, ch) = target.shape();
    let per_sample = sample_loss(kind, target, &warped.image, cfg)?;
    let per_pixel = channel_mean(&per_sample.values, h, w, ch).into_data();
    let valid = window_valid(&warped.valid_mask, h, w, kind, cfg);
    Ok(ViewResidual { per_pixel, valid })
}

/// Residual of a single synthesized view, mean-reduced over the pixels whose
/// window is fully valid.
pub fn single_view_loss(target: &Image, warped: &WarpResult, kind: LossKind, cfg: &SsimConfig) -> Result<LossReport> {
    target.same_shape(&warped.image)?;
    let r = view_residual(target, warped, kind, cfg)?;
    let (h, w, _) = target.shape();
    let map = Image::new(h, w, 1, zero_invalid(&r.per_pixel, &r.valid))?;
    LossReport::from_map(map, Some(r.valid))
}

fn zero_invalid(values: &[f64], valid: &[bool]) -> Vec<f64> {
    values.iter().zip(valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect()
}

/// Target frame, the two neighbouring frames, and target-to-neighbour poses.
#[derive(Debug, Clone, Copy)]
pub struct ViewTriplet<'a> {
    pub target: &'a Image,
    pub prev: &'a Image,
    pub next: &'a Image,
    pub pose_prev: &'a Pose,
    pub pose_next: &'a Pose,
    pub intrinsics: &'a CameraIntrinsics,
}

/// Per-pixel minimum over the two views' residuals, averaged over pixels
/// valid in at least one view.
#[allow(clippy::too_many_arguments)]
pub fn photometric_loss(
    i_t: &Image,
    i_prev: &Image,
    i_next: &Image,
    depth: &DepthMap,
    t_prev: &Pose,
    t_next: &Pose,
    k: &CameraIntrinsics,
    kind: LossKind,
    config: &SsimConfig,
) -> Result<LossReport> {
    let views = ViewTriplet {
        target: i_t,
        prev: i_prev,
        next: i_next,
        pose_prev: t_prev,
        pose_next: t_next,
        intrinsics: k,
    };
    Ok(photometric_objective(&views, depth, kind, config, false)?.0)
}

/// Photometric loss and, when requested, its gradient with respect to the
/// log-depth of every pixel.
pub(crate) fn photometric_objective(
    views: &ViewTriplet<'_>,
    depth: &DepthMap,
    kind: LossKind,
    cfg: &SsimConfig,
    with_grad: bool,
) -> Result<(LossReport, Option<Vec<f64>>)> {
    cfg.validate()?;
    views.target.same_shape(views.prev)?;
    views.target.same_shape(views.next)?;
    let (h, w, ch) = views.target.shape();
    let warps = [
        warp(views.next, depth, views.intrinsics, views.pose_next)?,
        warp(views.prev, depth, views.intrinsics, views.pose_prev)?,
    ];
    let residuals = [
        view_residual(views.target, &warps[0], kind, cfg)?,
        view_residual(views.target, &warps[1], kind, cfg)?,
    ];

    let n = h * w;
    let mut chosen: Vec<Option<usize>> = vec![None; n];
    let mut map = vec![0.0; n];
    for i in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (vi, r) in residuals.iter().enumerate() {
            if r.valid[i] && best.is_none_or(|(_, b)| r.per_pixel[i] < b) {
                best = Some((vi, r.per_pixel[i]));
            }
        }
        if let Some((vi, value)) = best {
            chosen[i] = Some(vi);
            map[i] = value;
        }
    }
    let valid: Vec<bool> = chosen.iter().map(Option::is_some).collect();
    let report = LossReport::from_map(Image::new(h, w, 1, map)?, Some(valid))?;
    if !with_grad {
        return Ok((report, None));
    }

    let weight = 1.0 / (report.n_valid * ch) as f64;
    let mut grad = vec![0.0; n];
    for (vi, warped) in warps.iter().enumerate() {
        let mut upstream = vec![0.0; n * ch];
        let mut any = false;
        for i in 0..n {
            if chosen[i] == Some(vi) {
                any = true;
                upstream[i * ch..(i + 1) * ch].fill(weight);
            }
        }
        if !any {
            continue;
        }
        let g = backward(kind, views.target, &warped.image, cfg, &upstream, None)?;
        for i in 0..n {
            if !warped.valid_mask[i] {
                continue;
            }
            for c in 0..ch {
                let s = i * ch + c;
                grad[i] += g.grad_b.data()[s] * warped.d_dlogdepth.data()[s];
            }
        }
    }
    Ok((report, Some(grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SmoothnessOptions {
    /// Divide disparity by its mean before differencing.
    pub mean_normalized: bool,
}

/// Edge-aware smoothness of disparity `1 / depth`, with forward differences
/// (zero past the last row/column) and image gradients averaged over
/// channels. The map holds the x-term plus the y-term per pixel.
pub fn smoothness_loss(depth: &DepthMap, image: &Image) -> Result<LossReport> {
    smoothness_loss_with(depth, image, SmoothnessOptions::default())
}

pub fn smoothness_loss_with(depth: &DepthMap, image: &Image, opts: SmoothnessOptions) -> Result<LossReport> {
    Ok(smoothness_objective(depth, image, opts, false)?.0)
}

/// Edge weights `exp(-|dI/dx|)` and `exp(-|dI/dy|)` per pixel; 0 where the
/// forward difference does not exist.
fn edge_weights(image: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w, ch) = image.shape();
    let mut wx = vec![0.0; h * w];
    let mut wy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let g = (0..ch).map(|c| (image.get(y, x + 1, c) - image.get(y, x, c)).abs()).sum::<f64>() / ch as f64;
                wx[i] = (-g).exp();
            }
            if y + 1 < h {
                let g = (0..ch).map(|c| (image.get(y + 1, x, c) - image.get(y, x, c)).abs()).sum::<f64>() / ch as f64;
                wy[i] = (-g).exp();
            }
        }
    }
    (wx, wy)
}

/// Smoothness loss and optionally its gradient with respect to log-depth.
pub(crate) fn smoothness_objective(
    depth: &DepthMap,
    image: &Image,
    opts: SmoothnessOptions,
    with_grad: bool,
) -> Result<(LossReport, Option<Vec<f64>>)> {
    let (h, w) = (depth.height(), depth.width());
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "image {}x{} does not match depth {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let raw = depth.disparity();
    let n = h * w;
    let mean = compensated_sum(raw.iter().copied()) / n as f64;
    let scale = if opts.mean_normalized { 1.0 / mean } else { 1.0 };
    let disp: Vec<f64> = raw.iter().map(|d| d * scale).collect();
    let (wx, wy) = edge_weights(image);

    let mut map = vec![0.0; n];
    // d loss / d disp (normalized disparity)
    let mut g_disp = vec![0.0; n];
    let inv_n = 1.0 / n as f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let diff = disp[i + 1] - disp[i];
                map[i] += diff.abs() * wx[i];
                let g = sign_or_zero(diff) * wx[i] * inv_n;
                g_disp[i + 1] += g;
                g_disp[i] -= g;
            }
            if y + 1 < h {
                let diff = disp[i + w] - disp[i];
                map[i] += diff.abs() * wy[i];
                let g = sign_or_zero(diff) * wy[i] * inv_n;
                g_disp[i + w] += g;
                g_disp[i] -= g;
            }
        }
    }
    let report = LossReport::from_map(Image::new(h, w, 1, map)?, None)?;
    if !with_grad {
        return Ok((report, None));
    }

    // back through the optional normalization: disp_j = raw_j / mean(raw)
    let g_raw: Vec<f64> = if opts.mean_normalized {
        let dot = compensated_sum(g_disp.iter().zip(&raw).map(|(g, r)| g * r));
        g_disp.iter().map(|g| g / mean - dot / (n as f64 * mean * mean)).collect()
    } else {
        g_disp
    };
    // raw = exp(-log depth)
    let grad = g_raw.iter().zip(&raw).map(|(g, r)| -g * r).collect();
    Ok((report, Some(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::fd_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 15.5, 11.5).unwrap()
    }

    fn texture(h: usize, w: usize, ch: usize) -> Image {
        Image::from_fn(h, w, ch, |y, x, c| {
            0.5 + 0.2 * (0.45 * x as f64 + 0.3 * c as f64).sin() + 0.15 * (0.37 * y as f64 + 0.2 * x as f64).cos()
        })
    }

    #[test]
    fn identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (u, v, d) = (rng.gen_range(-5.0..40.0), rng.gen_range(-5.0..30.0), rng.gen_range(0.1..80.0));
            let p = project(u, v, d, &k(), &Pose::identity()).unwrap();
            assert!((p.u - u).abs() < 1e-9 && (p.v - v).abs() < 1e-9);
            assert!((p.z - d).abs() < 1e-9);
        }
        assert!(project(1.0, 1.0, 0.0, &k(), &Pose::identity()).is_err());
    }

    #[test]
    fn translation_projection_closed_forms() {
        let p = project(3.0, 4.0, 10.0, &k(), &Pose::from_translation(0.1, 0.0, 0.0)).unwrap();
        assert!((p.u - (3.0 + 100.0 * 0.1 / 10.0)).abs() < 1e-12);
        assert!((p.v - 4.0).abs() < 1e-12);

        let p = project(15.5, 11.5, 10.0, &k(), &Pose::from_translation(0.0, 0.0, 0.5)).unwrap();
        assert!((p.u - 15.5).abs() < 1e-12 && (p.v - 11.5).abs() < 1e-12);
        assert!((p.z - 10.5).abs() < 1e-12);

        let behind = project(15.5, 11.5, 1.0, &k(), &Pose::from_translation(0.0, 0.0, -2.0)).unwrap();
        assert!(!behind.in_front());
    }

    #[test]
    fn forward_then_inverse_pose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let t = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let pose = Pose::from_axis_angle(axis, rng.gen_range(-0.2..0.2), t);
            let (u, v, d) = (rng.gen_range(0.0..31.0), rng.gen_range(0.0..23.0), rng.gen_range(2.0..50.0));
            let fwd = project(u, v, d, &k(), &pose).unwrap();
            let back = project(fwd.u, fwd.v, fwd.z, &k(), &pose.inverse()).unwrap();
            assert!((back.u - u).abs() < 1e-6 && (back.v - v).abs() < 1e-6);
            let ident = pose.compose(&pose.inverse());
            assert!((ident.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn pose_json_and_validation() {
        let p = Pose::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 0.3, Vector3::new(0.1, 0.2, 0.3));
        let json = serde_json::to_string(&p).unwrap();
        let back: Pose = serde_json::from_str(&json).unwrap();
        assert!((back.rotation() - p.rotation()).abs().max() < 1e-15);
        let bad = r#"{"rotation":[1,0,0,0,1,0,0,0,-1],"translation":[0,0,0]}"#;
        assert!(serde_json::from_str::<Pose>(bad).is_err());
        let k: CameraIntrinsics = serde_json::from_str(r#"{"fx":1,"fy":2,"cx":3,"cy":4}"#).unwrap();
        assert_eq!(k.fy, 2.0);
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn depth_map_invariants() {
        assert!(DepthMap::new(1, 2, vec![1.0, 0.0]).is_err());
        let d = DepthMap::new(1, 3, vec![0.5, 2.0, 3.0]).unwrap();
        for (disp, depth) in d.disparity().iter().zip(d.depth()) {
            assert!((disp * depth - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_nodes_midpoints_and_bounds() {
        let src = Image::new(2, 2, 1, vec![0.0, 1.0, 0.25, 0.75]).unwrap();
        let coords = CoordGrid {
            height: 1,
            width: 4,
            u: vec![1.0, 0.5, -0.01, 1.0],
            v: vec![1.0, 0.0, 0.0, 1.01],
        };
        let s = bilinear_sample(&src, &coords).unwrap();
        assert_eq!(s.values.data()[0], 0.75);
        assert_eq!(s.values.data()[1], 0.5);
        assert_eq!(s.valid, vec![true, true, false, false]);
    }

    #[test]
    fn bilinear_gradient_matches_fd() {
        let src = texture(10, 12, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = 1e-6;
        for _ in 0..200 {
            let (u, v): (f64, f64) = (rng.gen_range(0.01..10.99), rng.gen_range(0.01..8.99));
            // stay off the cell edges where the surface has kinks
            if (u.fract() - 0.5).abs() > 0.49 - eps || (v.fract() - 0.5).abs() > 0.49 - eps {
                continue;
            }
            let mut at = vec![(0.0, 0.0, 0.0); 2];
            let mut p = at.clone();
            let mut m = at.clone();
            assert!(bilinear_at(&src, u, v, &mut at));
            bilinear_at(&src, u + eps, v, &mut p);
            bilinear_at(&src, u - eps, v, &mut m);
            for c in 0..2 {
                let fd = (p[c].0 - m[c].0) / (2.0 * eps);
                assert!((fd - at[c].1).abs() <= 1e-6 * at[c].1.abs().max(1e-3));
            }
            bilinear_at(&src, u, v + eps, &mut p);
            bilinear_at(&src, u, v - eps, &mut m);
            for c in 0..2 {
                let fd = (p[c].0 - m[c].0) / (2.0 * eps);
                assert!((fd - at[c].2).abs() <= 1e-6 * at[c].2.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let src = texture(24, 32, 3);
        let d = DepthMap::constant(24, 32, 7.0).unwrap();
        let out = warp(&src, &d, &k(), &Pose::identity()).unwrap();
        assert!(out.valid_mask.iter().all(|&v| v));
        for (a, b) in out.image.data().iter().zip(src.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_translation_shifts_by_disparity() {
        let src = texture(24, 32, 1);
        let (depth, tx) = (10.0, 0.15);
        let shift = 100.0 * tx / depth;
        let d = DepthMap::constant(24, 32, depth).unwrap();
        let out = warp(&src, &d, &k(), &Pose::from_translation(tx, 0.0, 0.0)).unwrap();
        for y in 0..24 {
            for x in 0..30 {
                let i = y * 32 + x;
                assert!(out.valid_mask[i]);
                let (x0, f) = ((x as f64 + shift).floor() as usize, (x as f64 + shift).fract());
                let want = src.get(y, x0, 0) * (1.0 - f) + src.get(y, x0 + 1, 0) * f;
                assert!((out.image.data()[i] - want).abs() < 1e-12);
            }
        }
        assert!(!out.valid_mask[24 * 32 - 1]);

        let far = warp(&src, &d, &k(), &Pose::from_translation(50.0, 0.0, 0.0)).unwrap();
        assert!(far.valid_mask.iter().all(|&v| !v));
    }

    #[test]
    fn validity_shrinks_monotonically_with_translation() {
        let src = texture(16, 20, 1);
        let d = DepthMap::constant(16, 20, 5.0).unwrap();
        let mut prev: Option<Vec<bool>> = None;
        for tx in [0.4, 0.3, 0.2, 0.1, 0.05, 0.0] {
            let out = warp(&src, &d, &k(), &Pose::from_translation(tx, 0.0, 0.0)).unwrap();
            if let Some(p) = &prev {
                for (before, now) in p.iter().zip(&out.valid_mask) {
                    assert!(!before || *now);
                }
            }
            prev = Some(out.valid_mask);
        }
    }

    fn shifted_views(h: usize, w: usize) -> (Image, Image, Image) {
        // i_next(x) = tex(x - 1), i_prev(x) = tex(x + 1): one pixel of
        // disparity each way for a plane at 10 m with |tx| = 0.1, f = 100
        let f = |s: f64| {
            Image::from_fn(h, w, 1, move |y, x, _| {
                let x = x as f64 + s;
                0.5 + 0.25 * (0.5 * x).sin() + 0.1 * (0.3 * y as f64 + 0.2 * x).cos()
            })
        };
        (f(0.0), f(1.0), f(-1.0))
    }

    #[test]
    fn photometric_zero_for_static_scene() {
        let src = texture(16, 20, 3);
        let d = DepthMap::constant(16, 20, 4.0).unwrap();
        let id = Pose::identity();
        let kk = CameraIntrinsics::centered(100.0, 16, 20).unwrap();
        for kind in LossKind::ALL {
            let r = photometric_loss(&src, &src, &src, &d, &id, &id, &kk, kind, &SsimConfig::default()).unwrap();
            assert!(r.scalar.abs() <= 1e-9);
        }
    }

    #[test]
    fn photometric_min_and_single_view_fallback() {
        let (h, w) = (16, 24);
        let (it, ip, inx) = shifted_views(h, w);
        let kk = CameraIntrinsics::centered(100.0, h, w).unwrap();
        let gt = DepthMap::constant(h, w, 10.0).unwrap();
        let tn = Pose::from_translation(0.1, 0.0, 0.0);
        let tp = tn.inverse();
        let cfg = SsimConfig::default();
        for kind in LossKind::ALL {
            let at_gt = photometric_loss(&it, &ip, &inx, &gt, &tp, &tn, &kk, kind, &cfg).unwrap();
            assert!(at_gt.scalar < 1e-12, "{kind}: {}", at_gt.scalar);
            let off = gt.scaled(1.2).unwrap();
            let worse = photometric_loss(&it, &ip, &inx, &off, &tp, &tn, &kk, kind, &cfg).unwrap();
            assert!(worse.scalar > at_gt.scalar);

            // min never exceeds either single view on their common support
            let wn = warp(&inx, &off, &kk, &tn).unwrap();
            let wp = warp(&ip, &off, &kk, &tp).unwrap();
            let rn = single_view_loss(&it, &wn, kind, &cfg).unwrap();
            let rp = single_view_loss(&it, &wp, kind, &cfg).unwrap();
            let both: Vec<bool> = rn.valid.as_ref().unwrap().iter().zip(rp.valid.as_ref().unwrap()).map(|(a, b)| *a && *b).collect();
            let mean_on = |m: &Image| {
                let v: Vec<f64> = m.data().iter().zip(&both).filter_map(|(&x, &ok)| ok.then_some(x)).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let combined = mean_on(&worse.map);
            assert!(combined <= mean_on(&rn.map) + 1e-15);
            assert!(combined <= mean_on(&rp.map) + 1e-15);
        }

        // previous view pushed entirely out of frame
        let away = Pose::from_translation(100.0, 0.0, 0.0);
        let off = gt.scaled(1.2).unwrap();
        let only_next = photometric_loss(&it, &ip, &inx, &off, &away, &tn, &kk, LossKind::LossA, &cfg).unwrap();
        let wn = warp(&inx, &off, &kk, &tn).unwrap();
        let rn = single_view_loss(&it, &wn, LossKind::LossA, &cfg).unwrap();
        assert_eq!(only_next.scalar, rn.scalar);
        assert_eq!(only_next.n_valid, rn.n_valid);

        let none = photometric_loss(&it, &ip, &inx, &off, &away, &away, &kk, LossKind::LossA, &cfg);
        assert!(matches!(none, Err(Error::Degenerate(_))));
    }

    #[test]
    fn photometric_gradient_matches_fd() {
        let (h, w) = (12, 16);
        let (it, ip, inx) = shifted_views(h, w);
        let kk = CameraIntrinsics::centered(100.0, h, w).unwrap();
        let tn = Pose::from_translation(0.1, 0.0, 0.0);
        let tp = tn.inverse();
        let views = ViewTriplet { target: &it, prev: &ip, next: &inx, pose_prev: &tp, pose_next: &tn, intrinsics: &kk };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // irrational-ish depths keep sample points away from bilinear kinks
        let logd: Vec<f64> = (0..h * w).map(|_| (13.0f64).ln() + rng.gen_range(-0.05..0.05)).collect();
        for kind in [LossKind::LossA, LossKind::LossM, LossKind::ResidualBaseline] {
            let cfg = SsimConfig::default();
            let depth = DepthMap::new(h, w, logd.iter().map(|l| l.exp()).collect()).unwrap();
            let (_, g) = photometric_objective(&views, &depth, kind, &cfg, true).unwrap();
            let g = g.unwrap();
            let theta = Image::new(h, w, 1, logd.clone()).unwrap();
            let fd = fd_gradient(
                |t| {
                    let d = DepthMap::new(h, w, t.data().iter().map(|l| l.exp()).collect())?;
                    Ok(photometric_objective(&views, &d, kind, &cfg, false)?.0.scalar)
                },
                &theta,
                1e-7,
            )
            .unwrap();
            let scale = fd.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (i, (a, b)) in g.iter().zip(fd.data()).enumerate() {
                assert!((a - b).abs() <= 1e-4 * scale, "{kind}: {a} vs {b} at {i}");
            }
        }
    }

    #[test]
    fn smoothness_cases() {
        let flat = Image::filled(6, 8, 1, 0.3);
        let c = DepthMap::constant(6, 8, 2.0).unwrap();
        assert_eq!(smoothness_loss(&c, &flat).unwrap().scalar, 0.0);

        // disparity ramp along x with slope s
        let s = 0.01;
        let ramp = DepthMap::new(6, 8, (0..48).map(|i| 1.0 / (0.1 + s * (i % 8) as f64)).collect()).unwrap();
        let r = smoothness_loss(&ramp, &flat).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert!((r.map.get(y, x, 0) - s).abs() < 1e-12);
            }
        }

        let edge = Image::from_fn(6, 8, 3, |_, x, _| if x >= 4 { 1.0 } else { 0.0 });
        let r = smoothness_loss(&ramp, &edge).unwrap();
        assert!((r.map.get(2, 3, 0) - s * (-1.0f64).exp()).abs() < 1e-12);
        assert!((r.map.get(2, 2, 0) - s).abs() < 1e-12);
    }

    #[test]
    fn smoothness_offset_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = texture(7, 9, 1);
        let disp: Vec<f64> = (0..63).map(|_| rng.gen_range(0.05..1.0)).collect();
        let d = |f: &dyn Fn(f64) -> f64| DepthMap::new(7, 9, disp.iter().map(|v| 1.0 / f(*v)).collect()).unwrap();
        let base = smoothness_loss(&d(&|v| v), &img).unwrap().scalar;
        let shifted = smoothness_loss(&d(&|v| v + 0.3), &img).unwrap().scalar;
        let scaled = smoothness_loss(&d(&|v| 2.5 * v), &img).unwrap().scalar;
        assert!((base - shifted).abs() < 1e-12);
        assert!((scaled - 2.5 * base).abs() < 1e-12);
        // the normalized variant is scale invariant instead
        let opts = SmoothnessOptions { mean_normalized: true };
        let nb = smoothness_loss_with(&d(&|v| v), &img, opts).unwrap().scalar;
        let ns = smoothness_loss_with(&d(&|v| 2.5 * v), &img, opts).unwrap().scalar;
        assert!((nb - ns).abs() < 1e-12);
    }

    #[test]
    fn smoothness_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = texture(6, 7, 3);
        let logd: Vec<f64> = (0..42).map(|_| rng.gen_range(0.0..3.0)).collect();
        for mean_normalized in [false, true] {
            let opts = SmoothnessOptions { mean_normalized };
            let depth = DepthMap::new(6, 7, logd.iter().map(|l| l.exp()).collect()).unwrap();
            let (_, g) = smoothness_objective(&depth, &img, opts, true).unwrap();
            let theta = Image::new(6, 7, 1, logd.clone()).unwrap();
            let fd = fd_gradient(
                |t| {
                    let d = DepthMap::new(6, 7, t.data().iter().map(|l| l.exp()).collect())?;
                    Ok(smoothness_objective(&d, &img, opts, false)?.0.scalar)
                },
                &theta,
                1e-6,
            )
            .unwrap();
            for (a, b) in g.unwrap().iter().zip(fd.data()) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }
}
