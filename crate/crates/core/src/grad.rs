//! Analytic gradients of the image-pair losses, a central finite-difference
//! oracle, and the checks built on the two.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::num::sign_or_zero;
use crate::ssim::{component_values, loss, LossKind, SsimConfig};
use crate::stats::{tap_table, window_stats, WindowStatsMap};

/// `d loss / d a` and `d loss / d b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub grad_a: Image,
    pub grad_b: Image,
}

/// Partials of `(L, C, S)` with respect to `(mu_x, mu_y, var_x, var_y, cov)`.
///
/// The standard-deviation path has a kink at zero variance; its derivative
/// is taken as 0 there.
#[inline]
pub(crate) fn component_stat_partials(
    mu_x: f64,
    mu_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
    cfg: &SsimConfig,
) -> [[f64; 5]; 3] {
    let (sd_x, sd_y) = (var_x.max(0.0).sqrt(), var_y.max(0.0).sqrt());
    let dsd_x = if sd_x > 0.0 { 0.5 / sd_x } else { 0.0 };
    let dsd_y = if sd_y > 0.0 { 0.5 / sd_y } else { 0.0 };

    let ln = 2.0 * mu_x * mu_y + cfg.c1;
    let ld = mu_x * mu_x + mu_y * mu_y + cfg.c1;
    let dl = [
        (2.0 * mu_y * ld - 2.0 * mu_x * ln) / (ld * ld),
        (2.0 * mu_x * ld - 2.0 * mu_y * ln) / (ld * ld),
        0.0,
        0.0,
        0.0,
    ];

    let cn = 2.0 * sd_x * sd_y + cfg.c2;
    let cd = var_x + var_y + cfg.c2;
    let direct = -cn / (cd * cd);
    let dc = [
        0.0,
        0.0,
        direct + 2.0 * sd_y / cd * dsd_x,
        direct + 2.0 * sd_x / cd * dsd_y,
        0.0,
    ];

    let sn = cov + cfg.c3;
    let sd = sd_x * sd_y + cfg.c3;
    let ds = [
        0.0,
        0.0,
        -sn * sd_y / (sd * sd) * dsd_x,
        -sn * sd_x / (sd * sd) * dsd_y,
        1.0 / sd,
    ];
    [dl, dc, ds]
}

/// Back-propagates per-sample upstream weights `d total / d value[i]`
/// through the per-sample loss of `kind`.
pub(crate) fn backward(
    kind: LossKind,
    a: &Image,
    b: &Image,
    cfg: &SsimConfig,
    upstream: &[f64],
    stats: Option<&WindowStatsMap>,
) -> Result<GradientPair> {
    a.same_shape(b)?;
    assert_eq!(upstream.len(), a.len());
    let (h, w, ch) = a.shape();
    let (ad, bd) = (a.data(), b.data());
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; a.len()];

    let mae_w = kind.mae_weight(cfg);
    if mae_w != 0.0 {
        for i in 0..a.len() {
            let g = upstream[i] * mae_w * sign_or_zero(ad[i] - bd[i]);
            ga[i] += g;
            gb[i] -= g;
        }
    }

    if kind.uses_windows() {
        let owned;
        let stats = match stats {
            Some(s) => s,
            None => {
                owned = window_stats(a, b, cfg.window, cfg.padding)?;
                &owned
            }
        };
        let win = cfg.window;
        let rows = tap_table(h, win, cfg.padding);
        let cols = tap_table(w, win, cfg.padding);
        let inv_area = 1.0 / (win * win) as f64;
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let i = (y * w + x) * ch + c;
                    if upstream[i] == 0.0 {
                        continue;
                    }
                    let (mx, my, vx, vy, cv) = (
                        stats.mu_x[i],
                        stats.mu_y[i],
                        stats.var_x[i],
                        stats.var_y[i],
                        stats.cov_xy[i],
                    );
                    let (l, cc, s) = component_values(mx, my, vx, vy, cv, cfg);
                    let (_, outer) = kind.window_term(l, cc, s, cfg)?;
                    let inner = component_stat_partials(mx, my, vx, vy, cv, cfg);
                    let mut g = [0.0; 5];
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk = upstream[i]
                            * (outer[0] * inner[0][k] + outer[1] * inner[1][k] + outer[2] * inner[2][k])
                            * inv_area;
                    }
                    for &sy in &rows[y * win..(y + 1) * win] {
                        for &sx in &cols[x * win..(x + 1) * win] {
                            let q = (sy * w + sx) * ch + c;
                            let (dxq, dyq) = (ad[q] - mx, bd[q] - my);
                            ga[q] += g[0] + 2.0 * g[2] * dxq + g[4] * dyq;
                            gb[q] += g[1] + 2.0 * g[3] * dyq + g[4] * dxq;
                        }
                    }
                }
            }
        }
    }

    Ok(GradientPair {
        grad_a: Image::new(h, w, ch, ga)?,
        grad_b: Image::new(h, w, ch, gb)?,
    })
}

/// Exact gradient of the mean-reduced loss `kind(a, b)` with respect to both
/// images. The MAE subgradient is 0 at exact ties.
pub fn grad_loss(kind: LossKind, a: &Image, b: &Image, config: &SsimConfig) -> Result<GradientPair> {
    config.validate()?;
    a.same_shape(b)?;
    let upstream = vec![1.0 / a.len() as f64; a.len()];
    backward(kind, a, b, config, &upstream, None)
}

/// Central differences `(f(a + eps e_i) - f(a - eps e_i)) / (2 eps)` for
/// every sample of `a`.
pub fn fd_gradient(
    mut loss_fn: impl FnMut(&Image) -> Result<f64>,
    a: &Image,
    eps: f64,
) -> Result<Image> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Argument(format!("step must be positive, got {eps}")));
    }
    let mut probe = a.clone();
    let mut grad = Image::zeros_like(a);
    for i in 0..a.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = loss_fn(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = loss_fn(&probe)?;
        probe.data_mut()[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Numeric(format!("loss evaluation at sample {i} is not finite")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Elementwise relative error `|g - r| / max(|g|, |r|, floor)` where `floor`
/// is `1e-2 / n`, one percent of the per-sample weight of a mean over `n`
/// samples. Masked samples are skipped.
///
/// Returns `(max relative error, max absolute error)`.
pub fn relative_error(analytic: &Image, reference: &Image, mask: Option<&[bool]>) -> (f64, f64) {
    let floor = 1e-2 / analytic.len() as f64;
    let mut worst = (0.0f64, 0.0f64);
    for (i, (g, r)) in analytic.data().iter().zip(reference.data()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let abs = (g - r).abs();
        let rel = abs / g.abs().max(r.abs()).max(floor);
        worst.0 = worst.0.max(rel);
        worst.1 = worst.1.max(abs);
    }
    worst
}

/// Samples whose `|a - b|` sits within `10 eps` of the MAE kink (exact ties
/// excluded, where both the subgradient and the central difference are 0).
pub fn kink_mask(a: &Image, b: &Image, eps: f64) -> Vec<bool> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (x - y).abs();
            d == 0.0 || d >= 10.0 * eps
        })
        .collect()
}

/// A named loss kind plus its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSetup {
    pub name: String,
    pub kind: LossKind,
    pub config: SsimConfig,
}

impl LossSetup {
    pub fn new(name: impl Into<String>, kind: LossKind, config: SsimConfig) -> Self {
        LossSetup {
            name: name.into(),
            kind,
            config,
        }
    }

    /// MAE, the baseline residual, three exponent settings of the
    /// multiplicative loss and the default additive loss.
    pub fn standard_suite() -> Vec<LossSetup> {
        let base = SsimConfig::default();
        vec![
            LossSetup::new("mae", LossKind::Mae, base),
            LossSetup::new("baseline", LossKind::ResidualBaseline, base),
            LossSetup::new("m_1_1_1", LossKind::LossM, base.with_exponents(1.0, 1.0, 1.0)),
            LossSetup::new("m_1_2_1", LossKind::LossM, base.with_exponents(1.0, 2.0, 1.0)),
            LossSetup::new("m_1_1_2", LossKind::LossM, base.with_exponents(1.0, 1.0, 2.0)),
            LossSetup::new("a_default", LossKind::LossA, base),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub trials: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub setups: Vec<LossSetup>,
    /// Adds a small error to one analytic gradient entry so that the harness
    /// can be shown to fail.
    #[serde(default)]
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 0,
            height: 12,
            width: 12,
            channels: 1,
            trials: 50,
            eps: 1e-6,
            tolerance: 1e-5,
            setups: LossSetup::standard_suite(),
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub kind: LossKind,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub masked_samples: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub trials: usize,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

/// Compares analytic and central-difference gradients, with respect to both
/// images, on random image pairs.
pub fn run_gradcheck(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.trials == 0 {
        return Err(Error::Argument("at least one trial is required".into()));
    }
    let mut entries = Vec::with_capacity(opts.setups.len());
    for setup in &opts.setups {
        let mut entry = GradCheckEntry {
            name: setup.name.clone(),
            kind: setup.kind,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            masked_samples: 0,
            passed: true,
        };
        for trial in 0..opts.trials {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(trial as u64));
            let (h, w, c) = (opts.height, opts.width, opts.channels);
            let a = Image::from_fn(h, w, c, |_, _, _| rng.gen());
            let b = Image::from_fn(h, w, c, |_, _, _| rng.gen());
            let mut analytic = grad_loss(setup.kind, &a, &b, &setup.config)?;
            let mask = kink_mask(&a, &b, opts.eps);
            entry.masked_samples += mask.iter().filter(|&&m| !m).count();
            if opts.inject_fault {
                if let Some(i) = mask.iter().position(|&m| m) {
                    analytic.grad_a.data_mut()[i] += 1e-2 / a.len() as f64;
                }
            }
            let fd_a = fd_gradient(|x| Ok(loss(setup.kind, x, &b, &setup.config)?.scalar), &a, opts.eps)?;
            let fd_b = fd_gradient(|y| Ok(loss(setup.kind, &a, y, &setup.config)?.scalar), &b, opts.eps)?;
            for (g, r) in [(&analytic.grad_a, &fd_a), (&analytic.grad_b, &fd_b)] {
                let (rel, abs) = relative_error(g, r, Some(&mask));
                entry.max_rel_error = entry.max_rel_error.max(rel);
                entry.max_abs_error = entry.max_abs_error.max(abs);
            }
        }
        entry.passed = entry.max_rel_error < opts.tolerance;
        entries.push(entry);
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradCheckReport {
        eps: opts.eps,
        tolerance: opts.tolerance,
        trials: opts.trials,
        entries,
        passed,
    })
}

/// Summary of magnitudes over a map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Fraction of samples with magnitude below the dead threshold.
    pub dead_fraction: f64,
}

impl MagnitudeStats {
    fn from_values(values: impl IntoIterator<Item = f64>, threshold: f64) -> Self {
        let mut stats = MagnitudeStats {
            min: f64::INFINITY,
            max: 0.0,
            mean: 0.0,
            dead_fraction: 0.0,
        };
        let mut n = 0usize;
        for v in values {
            let m = v.abs();
            stats.min = stats.min.min(m);
            stats.max = stats.max.max(m);
            stats.mean += m;
            if m < threshold {
                stats.dead_fraction += 1.0;
            }
            n += 1;
        }
        if n > 0 {
            stats.mean /= n as f64;
            stats.dead_fraction /= n as f64;
        } else {
            stats.min = 0.0;
        }
        stats
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentPathStats {
    pub luminance: MagnitudeStats,
    pub contrast: MagnitudeStats,
    pub structure: MagnitudeStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessEntry {
    pub name: String,
    pub kind: LossKind,
    /// Gradient of the mean loss with respect to the second image.
    pub image_gradient: MagnitudeStats,
    /// Per-sample partials of the loss with respect to `L`, `C` and `S`;
    /// `None` for MAE.
    pub component_paths: Option<ComponentPathStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub dead_threshold: f64,
    pub entries: Vec<SmoothnessEntry>,
}

pub const DEFAULT_DEAD_THRESHOLD: f64 = 1e-8;

/// Gradient-magnitude statistics of several losses on the same image pair.
pub fn gradient_smoothness_report(
    a: &Image,
    b: &Image,
    setups: &[LossSetup],
    dead_threshold: f64,
) -> Result<SmoothnessReport> {
    let mut entries = Vec::with_capacity(setups.len());
    for setup in setups {
        let grads = grad_loss(setup.kind, a, b, &setup.config)?;
        let image_gradient = MagnitudeStats::from_values(grads.grad_b.data().iter().copied(), dead_threshold);
        let component_paths = if setup.kind.uses_windows() {
            let stats = window_stats(a, b, setup.config.window, setup.config.padding)?;
            let mut partials = [Vec::new(), Vec::new(), Vec::new()];
            for i in 0..stats.len() {
                let (l, c, s) = component_values(
                    stats.mu_x[i],
                    stats.mu_y[i],
                    stats.var_x[i],
                    stats.var_y[i],
                    stats.cov_xy[i],
                    &setup.config,
                );
                let (_, d) = setup.kind.window_term(l, c, s, &setup.config)?;
                for k in 0..3 {
                    partials[k].push(d[k]);
                }
            }
            let [pl, pc, ps] = partials;
            Some(ComponentPathStats {
                luminance: MagnitudeStats::from_values(pl, dead_threshold),
                contrast: MagnitudeStats::from_values(pc, dead_threshold),
                structure: MagnitudeStats::from_values(ps, dead_threshold),
            })
        } else {
            None
        };
        entries.push(SmoothnessEntry {
            name: setup.name.clone(),
            kind: setup.kind,
            image_gradient,
            component_paths,
        });
    }
    Ok(SmoothnessReport {
        dead_threshold,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssim::{form_value_and_partials, SsimForm};

    fn random_pair(seed: u64, h: usize, w: usize, c: usize) -> (Image, Image) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Image::from_fn(h, w, c, |_, _, _| rng.gen());
        let b = Image::from_fn(h, w, c, |_, _, _| rng.gen());
        (a, b)
    }

    fn check(kind: LossKind, cfg: &SsimConfig, a: &Image, b: &Image) -> f64 {
        let g = grad_loss(kind, a, b, cfg).unwrap();
        let fa = fd_gradient(|x| Ok(loss(kind, x, b, cfg)?.scalar), a, 1e-6).unwrap();
        let fb = fd_gradient(|y| Ok(loss(kind, a, y, cfg)?.scalar), b, 1e-6).unwrap();
        let mask = kink_mask(a, b, 1e-6);
        relative_error(&g.grad_a, &fa, Some(&mask))
            .0
            .max(relative_error(&g.grad_b, &fb, Some(&mask)).0)
    }

    #[test]
    fn fd_of_linear_and_quadratic_functionals() {
        let a = Image::filled(4, 5, 1, 0.5);
        let n = a.len() as f64;
        let g = fd_gradient(|x| Ok(x.data().iter().sum::<f64>() / n), &a, 1e-6).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0 / n).abs() < 1e-9));
        let g = fd_gradient(|x| Ok(x.data().iter().map(|v| v * v).sum::<f64>() / n), &a, 1e-6).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0 / n).abs() < 1e-9));
        assert!(fd_gradient(|_| Ok(0.0), &a, 0.0).is_err());
        assert!(matches!(fd_gradient(|_| Ok(f64::NAN), &a, 1e-3), Err(Error::Numeric(_))));
    }

    #[test]
    fn mae_gradient_on_constant_images() {
        let a = Image::filled(5, 5, 1, 0.3);
        let b = Image::filled(5, 5, 1, 0.7);
        let g = grad_loss(LossKind::Mae, &a, &b, &SsimConfig::default()).unwrap();
        assert!(g.grad_a.data().iter().all(|&v| v == -1.0 / 25.0));
        assert!(g.grad_b.data().iter().all(|&v| v == 1.0 / 25.0));
    }

    #[test]
    fn identity_point_of_additive_loss() {
        let (a, _) = random_pair(21, 8, 8, 1);
        let cfg = SsimConfig::default();
        let g = grad_loss(LossKind::LossA, &a, &a, &cfg).unwrap();
        let fd = fd_gradient(|x| Ok(loss(LossKind::LossA, x, &a, &cfg)?.scalar), &a, 1e-6).unwrap();
        // the minimum: both routes are ~0, so compare absolutely as well
        let (rel, abs) = relative_error(&g.grad_a, &fd, None);
        assert!(rel < 1e-5, "rel {rel}");
        assert!(abs < 1e-9);
    }

    #[test]
    fn every_kind_agrees_with_fd() {
        for (seed, (h, w, c)) in [(1, (12, 12, 1)), (2, (8, 8, 1)), (3, (6, 7, 3))] {
            let (a, b) = random_pair(seed, h, w, c);
            for setup in LossSetup::standard_suite() {
                let err = check(setup.kind, &setup.config, &a, &b);
                assert!(err < 1e-5, "{} seed {seed}: {err}", setup.name);
            }
        }
    }

    #[test]
    fn replicate_padding_and_wider_window() {
        let (a, b) = random_pair(4, 9, 9, 1);
        let mut cfg = SsimConfig::default().with_exponents(2.0, 1.0, 3.0);
        cfg.padding = crate::stats::Padding::Replicate;
        cfg.window = 5;
        for kind in [LossKind::LossM, LossKind::LossA, LossKind::ResidualBaseline] {
            assert!(check(kind, &cfg, &a, &b) < 1e-5);
        }
    }

    #[test]
    fn swap_symmetry() {
        let (a, b) = random_pair(5, 7, 9, 1);
        let cfg = SsimConfig::default();
        for kind in LossKind::ALL {
            let ab = grad_loss(kind, &a, &b, &cfg).unwrap();
            let ba = grad_loss(kind, &b, &a, &cfg).unwrap();
            for (x, y) in ab.grad_a.data().iter().zip(ba.grad_b.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dead_gradient_of_product_vs_additive() {
        // f = 1 - x y at y = 0 has no x-gradient; the additive surface keeps -w_c
        let cfg = SsimConfig::default();
        let (_, d) = form_value_and_partials(SsimForm::Multiplicative, 1.0, 0.7, -1.0, &cfg).unwrap();
        assert_eq!(d[1], 0.0);
        let (_, d) = form_value_and_partials(SsimForm::Additive, 1.0, 0.7, -1.0, &cfg).unwrap();
        assert_eq!(d[1], -cfg.w_c);
    }

    #[test]
    fn gradcheck_harness_passes_and_detects_faults() {
        let mut opts = GradCheckOptions {
            trials: 3,
            ..Default::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.entries.len(), 6);
        opts.inject_fault = true;
        let report = run_gradcheck(&opts).unwrap();
        assert!(!report.passed);
        assert!(report.entries.iter().all(|e| !e.passed));
    }

    /// Left half of `a` is black, so windows there have luminance near its
    /// floor. The multiplicative chain scales the contrast path by `L`, the
    /// additive one does not.
    fn dark_pair() -> (Image, Image) {
        let a = Image::from_fn(8, 8, 1, |y, x, _| if x < 4 { 0.0 } else { 0.2 + 0.05 * ((x + y) % 3) as f64 });
        let b = Image::from_fn(8, 8, 1, |y, x, _| 0.9 - 0.1 * ((x * 3 + y) % 4) as f64);
        (a, b)
    }

    #[test]
    fn smoothness_report_contrast_path() {
        let (a, b) = dark_pair();
        let base = SsimConfig::default();
        let setups = vec![
            LossSetup::new("m", LossKind::LossM, base),
            LossSetup::new("a", LossKind::LossA, base),
        ];
        for threshold in [DEFAULT_DEAD_THRESHOLD, 1e-3] {
            let report = gradient_smoothness_report(&a, &b, &setups, threshold).unwrap();
            let contrast = |i: usize| report.entries[i].component_paths.as_ref().unwrap().contrast;
            assert!(contrast(0).dead_fraction >= contrast(1).dead_fraction);
            if threshold == 1e-3 {
                assert!(contrast(0).dead_fraction > 0.0);
                assert_eq!(contrast(1).dead_fraction, 0.0);
            }
        }

        let report = gradient_smoothness_report(&a, &a, &setups, DEFAULT_DEAD_THRESHOLD).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: SmoothnessReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
