//! Synthetic two-view scenes with known depth, direct depth optimization
//! against the photometric losses, and standard depth metrics.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    photometric_objective, smoothness_objective, CameraIntrinsics, DepthMap, Pose, SmoothnessOptions, ViewTriplet,
};
use crate::image::Image;
use crate::num::compensated_sum;
use crate::pfm::write_pfm;
use crate::ssim::{LossKind, SsimConfig};

/// Procedural texture: a sum of sinusoids with seeded phases, orientations
/// and frequencies, defined in target-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureSpec {
    pub seed: u64,
    /// Mean spatial frequency in cycles per pixel.
    pub frequency: f64,
    pub channels: usize,
    pub components: usize,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            seed: 7,
            frequency: 0.04,
            channels: 3,
            components: 4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
}

/// Evaluable texture with values in `[0.1, 0.9]`.
#[derive(Debug, Clone)]
pub struct Texture {
    channels: usize,
    waves: Vec<Vec<Wave>>,
}

impl Texture {
    pub fn new(spec: &TextureSpec) -> Result<Self> {
        if !(spec.channels == 1 || spec.channels == 3) {
            return Err(Error::Argument(format!("texture channels must be 1 or 3, got {}", spec.channels)));
        }
        if !(spec.frequency > 0.0 && spec.frequency < 0.5) {
            return Err(Error::Argument(format!(
                "texture frequency must lie in (0, 0.5) cycles/px, got {}",
                spec.frequency
            )));
        }
        if spec.components == 0 {
            return Err(Error::Argument("texture needs at least one component".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let waves = (0..spec.channels)
            .map(|_| {
                (0..spec.components)
                    .map(|_| {
                        // orientations within 60 degrees of the x axis keep
                        // horizontal parallax observable
                        let angle = rng.gen_range(-PI / 3.0..PI / 3.0);
                        let freq = spec.frequency * rng.gen_range(0.7..1.3);
                        Wave {
                            kx: 2.0 * PI * freq * angle.cos(),
                            ky: 2.0 * PI * freq * angle.sin(),
                            phase: rng.gen_range(0.0..2.0 * PI),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Texture {
            channels: spec.channels,
            waves,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn eval(&self, u: f64, v: f64, c: usize) -> f64 {
        let waves = &self.waves[c];
        let amp = 0.4 / waves.len() as f64;
        0.5 + waves.iter().map(|w| amp * (w.kx * u + w.ky * v + w.phase).sin()).sum::<f64>()
    }
}

/// Surface geometry. Planes are given by affine inverse depth
/// `1/D(u, v) = p0 + px (u - cx) + py (v - cy)` in the target camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    FrontoParallel {
        depth: f64,
    },
    SlantedPlane {
        /// Depth at the principal point.
        depth: f64,
        /// Inverse-depth change per pixel along `u`.
        inv_depth_slope_x: f64,
        /// Inverse-depth change per pixel along `v`.
        inv_depth_slope_y: f64,
    },
    /// Two fronto-parallel planes split at a column: target pixels with
    /// `u < step_column - 0.5` see `left_depth`.
    TwoPlaneStep {
        left_depth: f64,
        right_depth: f64,
        step_column: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct Plane {
    p0: f64,
    px: f64,
    py: f64,
    /// Region in target `u`: `[u_min, u_max)`.
    u_min: f64,
    u_max: f64,
}

impl Plane {
    fn inv_depth(&self, u: f64, v: f64, k: &CameraIntrinsics) -> f64 {
        self.p0 + self.px * (u - k.cx) + self.py * (v - k.cy)
    }

    fn normal(&self, k: &CameraIntrinsics) -> nalgebra::Vector3<f64> {
        // n . X = 1 on the plane, from 1/Z = p0 + px fx X/Z + py fy Y/Z
        nalgebra::Vector3::new(self.px * k.fx, self.py * k.fy, self.p0)
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("{name} must be positive, got {v}")))
    }
}

impl Surface {
    fn planes(&self) -> Result<Vec<Plane>> {
        let all = (f64::NEG_INFINITY, f64::INFINITY);
        Ok(match *self {
            Surface::FrontoParallel { depth } => {
                positive("depth", depth)?;
                vec![Plane { p0: 1.0 / depth, px: 0.0, py: 0.0, u_min: all.0, u_max: all.1 }]
            }
            Surface::SlantedPlane {
                depth,
                inv_depth_slope_x,
                inv_depth_slope_y,
            } => {
                positive("depth", depth)?;
                vec![Plane {
                    p0: 1.0 / depth,
                    px: inv_depth_slope_x,
                    py: inv_depth_slope_y,
                    u_min: all.0,
                    u_max: all.1,
                }]
            }
            Surface::TwoPlaneStep {
                left_depth,
                right_depth,
                step_column,
            } => {
                positive("left_depth", left_depth)?;
                positive("right_depth", right_depth)?;
                let edge = step_column as f64 - 0.5;
                vec![
                    Plane { p0: 1.0 / left_depth, px: 0.0, py: 0.0, u_min: all.0, u_max: edge },
                    Plane { p0: 1.0 / right_depth, px: 0.0, py: 0.0, u_min: edge, u_max: all.1 },
                ]
            }
        })
    }
}

fn default_pose() -> Pose {
    Pose::from_translation(0.1, 0.0, 0.0)
}

fn default_focal() -> f64 {
    100.0
}

/// A synthetic scene. `pose` maps target-frame points into the next frame;
/// the previous frame uses its inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub surface: Surface,
    pub height: usize,
    pub width: usize,
    /// Defaults to `focal` on both axes with the principal point centered.
    #[serde(default)]
    pub intrinsics: Option<CameraIntrinsics>,
    #[serde(default = "default_focal")]
    pub focal: f64,
    #[serde(default = "default_pose")]
    pub pose: Pose,
    #[serde(default)]
    pub texture: TextureSpec,
    /// Poses carry no metric scale; evaluation then uses median scaling.
    #[serde(default)]
    pub scale_free: bool,
}

impl SceneSpec {
    /// Plane at 10 m, 0.1 m sideways motion, f = 100, 64x96.
    pub fn fronto_parallel_default() -> Self {
        SceneSpec {
            surface: Surface::FrontoParallel { depth: 10.0 },
            height: 64,
            width: 96,
            intrinsics: None,
            focal: default_focal(),
            pose: default_pose(),
            texture: TextureSpec::default(),
            scale_free: false,
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        match self.intrinsics {
            Some(k) => {
                k.validate()?;
                Ok(k)
            }
            None => CameraIntrinsics::centered(self.focal, self.height, self.width),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Rendered frames, ground truth and camera parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub target: Image,
    pub prev: Image,
    pub next: Image,
    pub depth: DepthMap,
    pub pose_prev: Pose,
    pub pose_next: Pose,
    pub intrinsics: CameraIntrinsics,
}

impl RenderedScene {
    pub fn views(&self) -> ViewTriplet<'_> {
        ViewTriplet {
            target: &self.target,
            prev: &self.prev,
            next: &self.next,
            pose_prev: &self.pose_prev,
            pose_next: &self.pose_next,
            intrinsics: &self.intrinsics,
        }
    }
}

/// Renders the target view and both neighbours by casting each pixel's ray
/// against the surface and reading the texture at the hit point's target
/// image coordinates.
pub fn render_scene(spec: &SceneSpec) -> Result<RenderedScene> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 {
        return Err(Error::Argument(format!("resolution {h}x{w} is empty")));
    }
    let k = spec.intrinsics()?;
    let texture = Texture::new(&spec.texture)?;
    let planes = spec.surface.planes()?;

    let mut depth = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64, y as f64);
            let plane = planes.iter().find(|p| u >= p.u_min && u < p.u_max).expect("planes cover the image");
            let inv = plane.inv_depth(u, v, &k);
            if !(inv > 0.0) {
                return Err(Error::Argument(format!("surface is behind the camera at pixel ({x}, {y})")));
            }
            depth.push(1.0 / inv);
        }
    }
    let depth = DepthMap::new(h, w, depth)?;
    let pose_next = spec.pose;
    let pose_prev = spec.pose.inverse();
    let target = render_view(&texture, &planes, &k, &Pose::identity(), h, w)?;
    let next = render_view(&texture, &planes, &k, &pose_next, h, w)?;
    let prev = render_view(&texture, &planes, &k, &pose_prev, h, w)?;
    Ok(RenderedScene {
        target,
        prev,
        next,
        depth,
        pose_prev,
        pose_next,
        intrinsics: k,
    })
}

/// `pose` maps target-frame points into the rendered camera's frame.
fn render_view(
    texture: &Texture,
    planes: &[Plane],
    k: &CameraIntrinsics,
    pose: &Pose,
    h: usize,
    w: usize,
) -> Result<Image> {
    let rt = pose.rotation().transpose();
    let center = -(rt * pose.translation());
    let normals: Vec<_> = planes.iter().map(|p| p.normal(k)).collect();
    let mut img = Image::filled(h, w, texture.channels(), 0.0);
    for y in 0..h {
        for x in 0..w {
            let dir = rt * k.ray(x as f64, y as f64);
            let mut best: Option<(f64, f64, f64)> = None;
            let mut fallback: Option<(f64, f64, f64)> = None;
            for (plane, n) in planes.iter().zip(&normals) {
                let denom = n.dot(&dir);
                if denom.abs() < 1e-15 {
                    continue;
                }
                let s = (1.0 - n.dot(&center)) / denom;
                let hit = center + dir * s;
                if !(s > 0.0 && hit.z > 0.0) {
                    continue;
                }
                let (u, v) = (k.fx * hit.x / hit.z + k.cx, k.fy * hit.y / hit.z + k.cy);
                if u >= plane.u_min && u < plane.u_max {
                    if best.is_none_or(|b| s < b.0) {
                        best = Some((s, u, v));
                    }
                } else if fallback.is_none_or(|b| s > b.0) {
                    // seen through the gap of a depth step: the far plane
                    // continued past its region
                    fallback = Some((s, u, v));
                }
            }
            let Some((_, u, v)) = best.or(fallback) else {
                return Err(Error::Argument(format!(
                    "pose leaves the surface behind the camera at pixel ({x}, {y})"
                )));
            };
            for c in 0..texture.channels() {
                img.set(y, x, c, texture.eval(u, v, c));
            }
        }
    }
    Ok(img)
}

fn default_kind() -> LossKind {
    LossKind::LossA
}

/// Settings for direct depth optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    #[serde(default = "default_kind")]
    pub loss: LossKind,
    pub ssim: SsimConfig,
    pub smoothness_weight: f64,
    pub smoothness: SmoothnessOptions,
    /// Initial step on log-depth, applied to the per-pixel gradient scaled
    /// by the pixel count.
    pub step_size: f64,
    pub iterations: usize,
    /// Halvings tried before a step is abandoned as stalled.
    pub max_halvings: u32,
    /// Constant initial depth in meters.
    pub init_depth: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            loss: LossKind::LossA,
            ssim: SsimConfig::default(),
            smoothness_weight: 1e-3,
            smoothness: SmoothnessOptions { mean_normalized: true },
            step_size: 1.0,
            iterations: 500,
            max_halvings: 30,
            init_depth: 20.0,
        }
    }
}

impl FitConfig {
    pub fn with_loss(loss: LossKind) -> Self {
        FitConfig {
            loss,
            ..FitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssim.validate()?;
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Argument(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.smoothness_weight >= 0.0 && self.smoothness_weight.is_finite()) {
            return Err(Error::Argument(format!(
                "smoothness weight must be nonnegative, got {}",
                self.smoothness_weight
            )));
        }
        positive("initial depth", self.init_depth)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub depth: DepthMap,
    /// Objective at the start and after every iteration.
    pub history: Vec<f64>,
    /// Iterations in which no halved step decreased the objective.
    pub stalled_iterations: usize,
}

impl FitResult {
    pub fn final_loss(&self) -> f64 {
        *self.history.last().expect("history holds the initial loss")
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("iter,loss\n");
        for (i, v) in self.history.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

fn objective(
    views: &ViewTriplet<'_>,
    theta: &[f64],
    cfg: &FitConfig,
    iteration: usize,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let (h, w) = (views.target.height(), views.target.width());
    let depth: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    if depth.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::Divergence { iteration });
    }
    let depth = DepthMap::new(h, w, depth)?;
    let diverged = |e: Error| match e {
        Error::Numeric(_) => Error::Divergence { iteration },
        other => other,
    };
    let (photo, g_photo) = photometric_objective(views, &depth, cfg.loss, &cfg.ssim, with_grad).map_err(diverged)?;
    let mut value = photo.scalar;
    let mut grad = g_photo;
    if cfg.smoothness_weight > 0.0 {
        let (smooth, g_smooth) =
            smoothness_objective(&depth, views.target, cfg.smoothness, with_grad).map_err(diverged)?;
        value += cfg.smoothness_weight * smooth.scalar;
        if let (Some(g), Some(gs)) = (grad.as_mut(), g_smooth) {
            for (a, b) in g.iter_mut().zip(gs) {
                *a += cfg.smoothness_weight * b;
            }
        }
    }
    if !value.is_finite() {
        return Err(Error::Divergence { iteration });
    }
    Ok((value, grad))
}

/// Gradient descent on log-depth from a constant initialization.
pub fn fit_depth(views: &ViewTriplet<'_>, cfg: &FitConfig) -> Result<FitResult> {
    let init = DepthMap::constant(views.target.height(), views.target.width(), cfg.init_depth)?;
    fit_depth_from(views, &init, cfg)
}

/// Gradient descent on log-depth. A step that raises the objective is
/// halved until it does not; the recorded history is therefore
/// non-increasing.
pub fn fit_depth_from(views: &ViewTriplet<'_>, init: &DepthMap, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let (h, w) = (views.target.height(), views.target.width());
    if (init.height(), init.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "initial depth {}x{} does not match frames {h}x{w}",
            init.height(),
            init.width()
        )));
    }
    let n = (h * w) as f64;
    let mut theta: Vec<f64> = init.depth().iter().map(|d| d.ln()).collect();
    let (mut current, mut grad) = objective(views, &theta, cfg, 0, true)?;
    let mut history = vec![current];
    let mut stalled = 0;
    let mut step = cfg.step_size;
    for iteration in 1..=cfg.iterations {
        let g = grad.take().expect("gradient requested");
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration });
        }
        let mut accepted = None;
        let mut trial_step = step;
        for _ in 0..=cfg.max_halvings {
            let candidate: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - trial_step * n * gi).collect();
            if candidate.iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence { iteration });
            }
            match objective(views, &candidate, cfg, iteration, true) {
                Ok((value, cg)) if value <= current => {
                    accepted = Some((candidate, value, cg));
                    break;
                }
                Ok(_) | Err(Error::Degenerate(_)) => trial_step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        match accepted {
            Some((candidate, value, cg)) => {
                theta = candidate;
                current = value;
                grad = cg;
                // recover from earlier halvings, never beyond the configured step
                step = (trial_step * 2.0).min(cfg.step_size);
            }
            None => {
                stalled += 1;
                grad = Some(g);
            }
        }
        history.push(current);
    }
    let depth = DepthMap::new(h, w, theta.iter().map(|t| t.exp()).collect())?;
    Ok(FitResult {
        depth,
        history,
        stalled_iterations: stalled,
    })
}

/// Depth evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Ground truth above this many meters is ignored.
    pub cap: f64,
    pub median_scaling: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cap: 80.0,
            median_scaling: false,
        }
    }
}

/// Smallest depth considered valid, in meters.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
}

pub fn evaluate_depth(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<DepthMetrics> {
    evaluate_depth_with(pred, gt, EvalOptions { cap, ..EvalOptions::default() })
}

/// Standard monocular depth metrics over pixels with ground truth in
/// `(1e-3, cap]`; predictions are clamped to the same range. A pixel counts
/// toward `delta_k` when `max(p/g, g/p) < 1.25^k`.
pub fn evaluate_depth_with(pred: &DepthMap, gt: &DepthMap, opts: EvalOptions) -> Result<DepthMetrics> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Dimension(format!(
            "prediction {}x{} does not match ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if !(opts.cap > MIN_EVAL_DEPTH) {
        return Err(Error::Argument(format!("depth cap must exceed {MIN_EVAL_DEPTH}, got {}", opts.cap)));
    }
    let pairs: Vec<(f64, f64)> = pred
        .depth()
        .iter()
        .zip(gt.depth())
        .filter(|(_, &g)| g > MIN_EVAL_DEPTH && g <= opts.cap)
        .map(|(&p, &g)| (p, g))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Degenerate("no ground-truth depth inside the evaluation range".into()));
    }
    let scale = if opts.median_scaling {
        median(pairs.iter().map(|p| p.1).collect()) / median(pairs.iter().map(|p| p.0).collect())
    } else {
        1.0
    };
    let n = pairs.len() as f64;
    let clamped: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&(p, g)| ((p * scale).clamp(MIN_EVAL_DEPTH, opts.cap), g))
        .collect();
    let mean = |f: &dyn Fn(f64, f64) -> f64| compensated_sum(clamped.iter().map(|&(p, g)| f(p, g))) / n;
    let within = |t: f64| clamped.iter().filter(|&&(p, g)| (p / g).max(g / p) < t).count() as f64 / n;
    Ok(DepthMetrics {
        abs_rel: mean(&|p, g| (p - g).abs() / g),
        sq_rel: mean(&|p, g| (p - g) * (p - g) / g),
        rmse: mean(&|p, g| (p - g) * (p - g)).sqrt(),
        rmse_log: mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
        delta1: within(1.25),
        delta2: within(1.25 * 1.25),
        delta3: within(1.25 * 1.25 * 1.25),
        n_valid: pairs.len(),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// One labelled configuration in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRun {
    pub name: String,
    pub config: FitConfig,
}

impl FitRun {
    pub fn new(name: impl Into<String>, config: FitConfig) -> Self {
        FitRun {
            name: name.into(),
            config,
        }
    }

    /// The residual baseline and the default additive loss.
    pub fn default_pair() -> Vec<FitRun> {
        vec![
            FitRun::new("baseline", FitConfig::with_loss(LossKind::ResidualBaseline)),
            FitRun::new("a", FitConfig::with_loss(LossKind::LossA)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareEntry {
    pub name: String,
    pub config: FitConfig,
    pub metrics: DepthMetrics,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub stalled_iterations: usize,
    pub history_csv: Option<PathBuf>,
    pub depth_pfm: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub scene: SceneSpec,
    pub initial_metrics: DepthMetrics,
    pub entries: Vec<CompareEntry>,
    /// Entry names from lowest to highest AbsRel.
    pub ranking: Vec<String>,
}

/// Fits every configuration from the same rendered scene and reports the
/// results side by side. With `out_dir`, each run's loss history
/// (`<name>_history.csv`) and depth (`<name>_depth.pfm`) are written there.
pub fn compare_losses(spec: &SceneSpec, runs: &[FitRun], out_dir: Option<&Path>) -> Result<CompareReport> {
    if runs.len() < 2 {
        return Err(Error::Argument(format!("comparison needs at least 2 configs, got {}", runs.len())));
    }
    let scene = render_scene(spec)?;
    let eval = EvalOptions {
        median_scaling: spec.scale_free,
        ..EvalOptions::default()
    };
    let results: Vec<Result<FitResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = runs
            .iter()
            .map(|run| {
                let scene = &scene;
                s.spawn(move || fit_depth(&scene.views(), &run.config))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fit thread panicked")).collect()
    });

    let first = runs[0].config.init_depth;
    let init = DepthMap::constant(spec.height, spec.width, first)?;
    let initial_metrics = evaluate_depth_with(&init, &scene.depth, eval)?;
    let mut entries = Vec::with_capacity(runs.len());
    for (run, result) in runs.iter().zip(results) {
        let fit = result?;
        let (mut history_csv, mut depth_pfm) = (None, None);
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let csv = dir.join(format!("{}_history.csv", run.name));
            std::fs::write(&csv, fit.history_csv()).map_err(|e| Error::io(&csv, e))?;
            let pfm = dir.join(format!("{}_depth.pfm", run.name));
            write_pfm(&pfm, &fit.depth.to_image())?;
            history_csv = Some(csv);
            depth_pfm = Some(pfm);
        }
        entries.push(CompareEntry {
            name: run.name.clone(),
            config: run.config,
            metrics: evaluate_depth_with(&fit.depth, &scene.depth, eval)?,
            initial_loss: fit.history[0],
            final_loss: fit.final_loss(),
            iterations: fit.history.len() - 1,
            stalled_iterations: fit.stalled_iterations,
            history_csv,
            depth_pfm,
        });
    }
    let mut order: Vec<&CompareEntry> = entries.iter().collect();
    order.sort_by(|a, b| a.metrics.abs_rel.total_cmp(&b.metrics.abs_rel));
    let ranking = order.iter().map(|e| e.name.clone()).collect();
    Ok(CompareReport {
        scene: spec.clone(),
        initial_metrics,
        entries,
        ranking,
    })
}
