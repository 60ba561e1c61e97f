//! Luminance, contrast and structure components and the loss variants built
//! from them: classic multiplicative SSIM, the transformed multiplicative
//! form, the additive form, and their blends with MAE.
//!
//! Every map is computed per channel and averaged across channels when a
//! [`LossReport`] is formed, so a report map is always `H x W x 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::{compensated_sum, pow_with_derivative};
use crate::stats::{window_stats, Padding, WindowStatsMap};

/// Exponents, weights and constants shared by every loss variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub w_l: f64,
    pub w_c: f64,
    pub w_s: f64,
    /// SSIM/MAE blend of the baseline residual.
    pub kappa: f64,
    /// SSIM weight of the multiplicative loss.
    pub w: f64,
    /// MAE weight of the additive loss.
    pub w_1: f64,
    pub window: usize,
    pub padding: Padding,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        let c2 = 0.03f64 * 0.03;
        SsimConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            w_l: 0.5,
            w_c: 0.5,
            w_s: 0.7,
            kappa: 0.85,
            w: 0.85,
            w_1: 0.4,
            window: 3,
            padding: Padding::Reflect,
            c1: 0.01f64 * 0.01,
            c2,
            c3: c2 / 2.0,
        }
    }
}

impl SsimConfig {
    pub fn with_exponents(mut self, alpha: f64, beta: f64, gamma: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self.gamma = gamma;
        self
    }

    pub fn with_additive_weights(mut self, w_1: f64, w_l: f64, w_c: f64, w_s: f64) -> Self {
        self.w_1 = w_1;
        self.w_l = w_l;
        self.w_c = w_c;
        self.w_s = w_s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("w_l", self.w_l),
            ("w_c", self.w_c),
            ("w_s", self.w_s),
            ("w_1", self.w_1),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Argument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("kappa", self.kappa), ("w", self.w)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Argument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "window size must be odd and positive, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Per-sample luminance (`l`), contrast (`c`) and structure (`s`) maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMaps {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub l: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
}

impl ComponentMaps {
    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }
}

/// `(L, C, S)` for one window from its moments.
#[inline]
pub fn component_values(
    mu_x: f64,
    mu_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
    cfg: &SsimConfig,
) -> (f64, f64, f64) {
    // sqrt of the product keeps C = S = 1 exact when both windows match
    let sd_xy = (var_x.max(0.0) * var_y.max(0.0)).sqrt();
    let cov = cov.clamp(-sd_xy, sd_xy);
    let l = (2.0 * mu_x * mu_y + cfg.c1) / (mu_x * mu_x + mu_y * mu_y + cfg.c1);
    let c = (2.0 * sd_xy + cfg.c2) / (var_x + var_y + cfg.c2);
    let s = (cov + cfg.c3) / (sd_xy + cfg.c3);
    (l, c, s)
}

pub fn components(stats: &WindowStatsMap, config: &SsimConfig) -> Result<ComponentMaps> {
    let n = stats.len();
    let mut cm = ComponentMaps {
        height: stats.height,
        width: stats.width,
        channels: stats.channels,
        l: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (l, c, s) = component_values(
            stats.mu_x[i],
            stats.mu_y[i],
            stats.var_x[i],
            stats.var_y[i],
            stats.cov_xy[i],
            config,
        );
        if !(l.is_finite() && c.is_finite() && s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite SSIM component at sample {i}")));
        }
        cm.l.push(l);
        cm.c.push(c);
        cm.s.push(s);
    }
    Ok(cm)
}

/// The three ways of combining `(L, C, S)`.
///
/// `Classic` evaluates the similarity `L^a C^b S^g`; `Multiplicative` and
/// `Additive` evaluate losses (zero at identity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimForm {
    Classic,
    Multiplicative,
    Additive,
}

fn is_integer(p: f64) -> bool {
    p.fract() == 0.0
}

/// Value of the chosen form at one sample together with its partial
/// derivatives with respect to `(L, C, S)`.
#[inline]
pub fn form_value_and_partials(
    form: SsimForm,
    l: f64,
    c: f64,
    s: f64,
    cfg: &SsimConfig,
) -> Result<(f64, [f64; 3])> {
    match form {
        SsimForm::Classic => classic_value_and_partials(l, c, s, cfg.alpha, cfg.beta, cfg.gamma),
        SsimForm::Multiplicative => {
            let (pl, dl) = pow_with_derivative(l, cfg.alpha);
            let (pc, dc) = pow_with_derivative(c, cfg.beta);
            let (ps, ds) = pow_with_derivative(0.5 * (1.0 + s), cfg.gamma);
            Ok((
                1.0 - pl * pc * ps,
                [-dl * pc * ps, -pl * dc * ps, -0.5 * pl * pc * ds],
            ))
        }
        SsimForm::Additive => Ok((
            cfg.w_l * (1.0 - l) + cfg.w_c * (1.0 - c) + cfg.w_s * (1.0 - 0.5 * (1.0 + s)),
            [-cfg.w_l, -cfg.w_c, -0.5 * cfg.w_s],
        )),
    }
}

pub(crate) fn classic_value_and_partials(
    l: f64,
    c: f64,
    s: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<(f64, [f64; 3])> {
    if s < 0.0 && !is_integer(gamma) {
        return Err(Error::Domain(format!(
            "structure {s} is negative and gamma = {gamma} is not an integer"
        )));
    }
    let (pl, dl) = pow_with_derivative(l, alpha);
    let (pc, dc) = pow_with_derivative(c, beta);
    let (ps, ds) = pow_with_derivative(s, gamma);
    Ok((pl * pc * ps, [dl * pc * ps, pl * dc * ps, pl * pc * ds]))
}

fn map_form(cm: &ComponentMaps, config: &SsimConfig, form: SsimForm) -> Result<Vec<f64>> {
    (0..cm.len())
        .map(|i| form_value_and_partials(form, cm.l[i], cm.c[i], cm.s[i], config).map(|(v, _)| v))
        .collect()
}

/// Classic SSIM `L^alpha * C^beta * S^gamma` per sample.
pub fn ssim_classic(cm: &ComponentMaps, config: &SsimConfig) -> Result<Vec<f64>> {
    map_form(cm, config, SsimForm::Classic)
}

/// `1 - L^alpha * C^beta * ((1 + S) / 2)^gamma` per sample, in `[0, 1]`.
pub fn ssim_m(cm: &ComponentMaps, config: &SsimConfig) -> Vec<f64> {
    map_form(cm, config, SsimForm::Multiplicative).expect("transformed form has no domain errors")
}

/// `w_l (1 - L) + w_c (1 - C) + w_s (1 - (1 + S) / 2)` per sample.
pub fn ssim_a(cm: &ComponentMaps, config: &SsimConfig) -> Vec<f64> {
    map_form(cm, config, SsimForm::Additive).expect("additive form has no domain errors")
}

/// Which per-pixel loss to evaluate on an image pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `|a - b|`
    Mae,
    /// `(kappa / 2)(1 - SSIM) + (1 - kappa)|a - b|` with unit exponents.
    ResidualBaseline,
    /// `(1 - w) MAE + w SSIM_m`
    LossM,
    /// `w_1 MAE + SSIM_a`
    LossA,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Mae,
        LossKind::ResidualBaseline,
        LossKind::LossM,
        LossKind::LossA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mae => "mae",
            LossKind::ResidualBaseline => "baseline",
            LossKind::LossM => "m",
            LossKind::LossA => "a",
        }
    }

    pub(crate) fn uses_windows(self) -> bool {
        self != LossKind::Mae
    }

    /// Weight of the `|a - b|` term.
    pub(crate) fn mae_weight(self, cfg: &SsimConfig) -> f64 {
        match self {
            LossKind::Mae => 1.0,
            LossKind::ResidualBaseline => 1.0 - cfg.kappa,
            LossKind::LossM => 1.0 - cfg.w,
            LossKind::LossA => cfg.w_1,
        }
    }

    /// Windowed term at one sample and its `(L, C, S)` partials.
    #[inline]
    pub(crate) fn window_term(self, l: f64, c: f64, s: f64, cfg: &SsimConfig) -> Result<(f64, [f64; 3])> {
        match self {
            LossKind::Mae => Ok((0.0, [0.0; 3])),
            LossKind::ResidualBaseline => {
                let (v, d) = classic_value_and_partials(l, c, s, 1.0, 1.0, 1.0)?;
                let k = 0.5 * cfg.kappa;
                Ok((k * (1.0 - v), [-k * d[0], -k * d[1], -k * d[2]]))
            }
            LossKind::LossM => {
                let (v, d) = form_value_and_partials(SsimForm::Multiplicative, l, c, s, cfg)?;
                Ok((cfg.w * v, [cfg.w * d[0], cfg.w * d[1], cfg.w * d[2]]))
            }
            LossKind::LossA => form_value_and_partials(SsimForm::Additive, l, c, s, cfg),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(LossKind::Mae),
            "baseline" | "residual_baseline" => Ok(LossKind::ResidualBaseline),
            "m" | "loss_m" => Ok(LossKind::LossM),
            "a" | "loss_a" => Ok(LossKind::LossA),
            other => Err(Error::Argument(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// A per-pixel loss map and its mean over valid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub scalar: f64,
    /// `H x W x 1`; invalid pixels hold 0.
    pub map: Image,
    pub n_valid: usize,
    /// `None` means every pixel is valid.
    pub valid: Option<Vec<bool>>,
}

impl LossReport {
    pub(crate) fn from_map(map: Image, valid: Option<Vec<bool>>) -> Result<Self> {
        let (scalar, n_valid) = match &valid {
            None => (
                compensated_sum(map.data().iter().copied()) / map.len() as f64,
                map.len(),
            ),
            Some(mask) => {
                let n = mask.iter().filter(|&&v| v).count();
                if n == 0 {
                    return Err(Error::Degenerate("no valid pixels".into()));
                }
                let sum = compensated_sum(
                    map.data()
                        .iter()
                        .zip(mask)
                        .filter_map(|(&v, &ok)| ok.then_some(v)),
                );
                (sum / n as f64, n)
            }
        };
        if !scalar.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        Ok(LossReport {
            scalar,
            map,
            n_valid,
            valid,
        })
    }

    /// `{variant, config, scalar, n_valid}`
    pub fn to_json(&self, variant: LossKind, config: &SsimConfig) -> serde_json::Value {
        serde_json::json!({
            "variant": variant.name(),
            "config": config,
            "scalar": self.scalar,
            "n_valid": self.n_valid,
        })
    }
}

/// Per-sample loss values before channel averaging.
pub(crate) struct SampleLoss {
    pub values: Vec<f64>,
}

pub(crate) fn sample_loss(kind: LossKind, a: &Image, b: &Image, cfg: &SsimConfig) -> Result<SampleLoss> {
    cfg.validate()?;
    a.same_shape(b)?;
    let mae_w = kind.mae_weight(cfg);
    let mut values: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| mae_w * (x - y).abs())
        .collect();
    if !kind.uses_windows() {
        return Ok(SampleLoss { values });
    }
    let stats = window_stats(a, b, cfg.window, cfg.padding)?;
    for (i, v) in values.iter_mut().enumerate() {
        let (l, c, s) = component_values(
            stats.mu_x[i],
            stats.mu_y[i],
            stats.var_x[i],
            stats.var_y[i],
            stats.cov_xy[i],
            cfg,
        );
        *v += kind.window_term(l, c, s, cfg)?.0;
    }
    Ok(SampleLoss { values })
}

/// Averages interleaved per-sample values over channels into an `H x W x 1`
/// map.
pub(crate) fn channel_mean(values: &[f64], height: usize, width: usize, channels: usize) -> Image {
    let data = values
        .chunks(channels)
        .map(|px| px.iter().sum::<f64>() / channels as f64)
        .collect();
    Image::new(height, width, 1, data).expect("shape preserved")
}

/// Evaluates `kind` on an image pair and reduces by the mean.
pub fn loss(kind: LossKind, a: &Image, b: &Image, config: &SsimConfig) -> Result<LossReport> {
    let per_sample = sample_loss(kind, a, b, config)?;
    let (h, w, c) = a.shape();
    LossReport::from_map(channel_mean(&per_sample.values, h, w, c), None)
}

pub fn mae(a: &Image, b: &Image) -> Result<LossReport> {
    loss(LossKind::Mae, a, b, &SsimConfig::default())
}

pub fn residual_baseline(a: &Image, b: &Image, config: &SsimConfig) -> Result<LossReport> {
    loss(LossKind::ResidualBaseline, a, b, config)
}

pub fn loss_m(a: &Image, b: &Image, config: &SsimConfig) -> Result<LossReport> {
    loss(LossKind::LossM, a, b, config)
}

pub fn loss_a(a: &Image, b: &Image, config: &SsimConfig) -> Result<LossReport> {
    loss(LossKind::LossA, a, b, config)
}

/// Toy surfaces over `x` (combined luminance/contrast factor, `[0, 1]`) and
/// `y` (structure, `[-1, 1]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepVariant {
    /// `1 - x^alpha * y^gamma`
    Classic,
    /// `1 - x^alpha * ((1 + y) / 2)^gamma`
    M,
    /// `w_c (1 - x) + w_s (1 - (1 + y) / 2)`
    A,
}

impl FromStr for SweepVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" => Ok(SweepVariant::Classic),
            "m" => Ok(SweepVariant::M),
            "a" => Ok(SweepVariant::A),
            other => Err(Error::Argument(format!("unknown sweep variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Samples per axis, endpoints included.
    pub resolution: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            x_min: 0.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
            resolution: 21,
        }
    }
}

impl SweepGrid {
    fn axis(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
        (0..n).map(move |i| {
            if n == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::Argument("sweep resolution must be at least 1".into()));
        }
        let bounds = [self.x_min, self.x_max, self.y_min, self.y_max];
        if bounds.iter().any(|v| !v.is_finite()) || self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::Argument(format!("invalid sweep bounds {bounds:?}")));
        }
        if self.x_min < 0.0 || self.x_max > 1.0 || self.y_min < -1.0 || self.y_max > 1.0 {
            return Err(Error::Argument(format!(
                "sweep bounds {bounds:?} leave x in [0, 1], y in [-1, 1]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

/// Closed-form toy surface value and its partials `(df/dx, df/dy)`.
pub fn surface_value_and_partials(
    variant: SweepVariant,
    config: &SsimConfig,
    x: f64,
    y: f64,
) -> Result<(f64, [f64; 2])> {
    match variant {
        SweepVariant::Classic => {
            if y < 0.0 && !is_integer(config.gamma) {
                return Err(Error::Domain(format!(
                    "negative structure {y} with non-integer gamma {}",
                    config.gamma
                )));
            }
            let (px, dx) = pow_with_derivative(x, config.alpha);
            let (py, dy) = pow_with_derivative(y, config.gamma);
            Ok((1.0 - px * py, [-dx * py, -px * dy]))
        }
        SweepVariant::M => {
            let (px, dx) = pow_with_derivative(x, config.alpha);
            let (py, dy) = pow_with_derivative(0.5 * (1.0 + y), config.gamma);
            Ok((1.0 - px * py, [-dx * py, -0.5 * px * dy]))
        }
        SweepVariant::A => Ok((
            config.w_c * (1.0 - x) + config.w_s * (1.0 - 0.5 * (1.0 + y)),
            [-config.w_c, -0.5 * config.w_s],
        )),
    }
}

/// Evaluates a toy surface on a regular grid, `x` varying fastest.
pub fn sweep_surface(variant: SweepVariant, config: &SsimConfig, grid: &SweepGrid) -> Result<Vec<SweepPoint>> {
    grid.validate()?;
    let mut out = Vec::with_capacity(grid.resolution * grid.resolution);
    for y in SweepGrid::axis(grid.y_min, grid.y_max, grid.resolution) {
        for x in SweepGrid::axis(grid.x_min, grid.x_max, grid.resolution) {
            let (value, _) = surface_value_and_partials(variant, config, x, y)?;
            out.push(SweepPoint { x, y, value });
        }
    }
    Ok(out)
}

/// CSV with header `x,y,value`. Values use Rust's shortest round-trip float
/// formatting.
pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("x,y,value\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.x, p.y, p.value));
    }
    s
}

/// The four toy panels: transformed multiplicative with unit exponents,
/// untransformed with an even structure exponent, transformed with large
/// exponents, and the additive form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepPreset {
    Fig2a,
    Fig2b,
    Fig2c,
    Fig2d,
}

impl SweepPreset {
    pub const ALL: [SweepPreset; 4] = [
        SweepPreset::Fig2a,
        SweepPreset::Fig2b,
        SweepPreset::Fig2c,
        SweepPreset::Fig2d,
    ];

    pub fn setup(self) -> (SweepVariant, SsimConfig) {
        let base = SsimConfig::default();
        match self {
            SweepPreset::Fig2a => (SweepVariant::M, base.with_exponents(1.0, 1.0, 1.0)),
            SweepPreset::Fig2b => (SweepVariant::Classic, base.with_exponents(1.0, 1.0, 2.0)),
            SweepPreset::Fig2c => (SweepVariant::M, base.with_exponents(3.0, 1.0, 3.0)),
            SweepPreset::Fig2d => {
                let mut cfg = base;
                cfg.w_c = 0.5;
                cfg.w_s = 0.5;
                (SweepVariant::A, cfg)
            }
        }
    }
}

impl FromStr for SweepPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig2a" => Ok(SweepPreset::Fig2a),
            "fig2b" => Ok(SweepPreset::Fig2b),
            "fig2c" => Ok(SweepPreset::Fig2c),
            "fig2d" => Ok(SweepPreset::Fig2d),
            other => Err(Error::Argument(format!("unknown sweep preset {other:?}"))),
        }
    }
}
