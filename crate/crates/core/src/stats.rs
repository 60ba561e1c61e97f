//! Box-window first and second moments of an image pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Border handling for windows that extend past the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Mirror without repeating the edge sample (`-1 -> 1`).
    #[default]
    Reflect,
    /// Repeat the edge sample.
    Replicate,
}

impl Padding {
    /// Maps a possibly out-of-range coordinate onto `0..n`.
    #[inline]
    pub fn resolve(self, i: isize, n: usize) -> usize {
        let last = n as isize - 1;
        let j = match self {
            Padding::Reflect => {
                if i < 0 {
                    -i
                } else if i > last {
                    2 * last - i
                } else {
                    i
                }
            }
            Padding::Replicate => i.clamp(0, last),
        };
        debug_assert!((0..=last).contains(&j), "window radius exceeds image");
        j as usize
    }
}

/// Per-pixel window statistics for an image pair, laid out like [`Image`]
/// data (row-major, interleaved channels).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStatsMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub window: usize,
    pub padding: Padding,
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub var_x: Vec<f64>,
    pub var_y: Vec<f64>,
    pub cov_xy: Vec<f64>,
}

impl WindowStatsMap {
    pub fn len(&self) -> usize {
        self.mu_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_x.is_empty()
    }
}

pub(crate) fn check_window(height: usize, width: usize, window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "window size must be odd and positive, got {window}"
        )));
    }
    if window > height || window > width {
        return Err(Error::Dimension(format!(
            "window {window} does not fit a {height}x{width} image"
        )));
    }
    Ok(())
}

/// Resolved neighbour indices along one axis: `table[i * window + k]` is the
/// source coordinate of window tap `k` for output coordinate `i`.
pub(crate) fn tap_table(n: usize, window: usize, padding: Padding) -> Vec<usize> {
    let r = (window / 2) as isize;
    let mut table = Vec::with_capacity(n * window);
    for i in 0..n as isize {
        for k in -r..=r {
            table.push(padding.resolve(i + k, n));
        }
    }
    table
}

/// Box-window means, population variances and covariance of `a` and `b`.
///
/// Sums are separable: a horizontal pass over the resolved taps followed by
/// a vertical pass.
pub fn window_stats(a: &Image, b: &Image, window: usize, padding: Padding) -> Result<WindowStatsMap> {
    a.same_shape(b)?;
    let (h, w, ch) = a.shape();
    check_window(h, w, window)?;

    let cols = tap_table(w, window, padding);
    let rows = tap_table(h, window, padding);
    let area = (window * window) as f64;
    let n = a.len();

    // five accumulated moments per sample: a, b, a^2, b^2, ab
    let mut horiz = vec![[0.0f64; 5]; n];
    let (ad, bd) = (a.data(), b.data());
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = [0.0; 5];
                for &sx in &cols[x * window..(x + 1) * window] {
                    let i = (y * w + sx) * ch + c;
                    let (va, vb) = (ad[i], bd[i]);
                    acc[0] += va;
                    acc[1] += vb;
                    acc[2] += va * va;
                    acc[3] += vb * vb;
                    acc[4] += va * vb;
                }
                horiz[(y * w + x) * ch + c] = acc;
            }
        }
    }

    let mut out = WindowStatsMap {
        height: h,
        width: w,
        channels: ch,
        window,
        padding,
        mu_x: vec![0.0; n],
        mu_y: vec![0.0; n],
        var_x: vec![0.0; n],
        var_y: vec![0.0; n],
        cov_xy: vec![0.0; n],
    };
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = [0.0; 5];
                for &sy in &rows[y * window..(y + 1) * window] {
                    let src = &horiz[(sy * w + x) * ch + c];
                    for (a, s) in acc.iter_mut().zip(src) {
                        *a += s;
                    }
                }
                let i = (y * w + x) * ch + c;
                let (mx, my) = (acc[0] / area, acc[1] / area);
                out.mu_x[i] = mx;
                out.mu_y[i] = my;
                out.var_x[i] = (acc[2] / area - mx * mx).max(0.0);
                out.var_y[i] = (acc[3] / area - my * my).max(0.0);
                out.cov_xy[i] = acc[4] / area - mx * my;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-pass oracle: explicit window gather, mean first, then centered
    /// sums.
    fn oracle(a: &Image, b: &Image, y: usize, x: usize, c: usize, window: usize, pad: Padding) -> [f64; 5] {
        let r = (window / 2) as isize;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let sy = pad.resolve(y as isize + dy, a.height());
                let sx = pad.resolve(x as isize + dx, a.width());
                xs.push(a.get(sy, sx, c));
                ys.push(b.get(sy, sx, c));
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cv = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
        [mx, my, vx, vy, cv]
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |_, _, _| rng.gen())
    }

    #[test]
    fn constant_pair_has_zero_spread() {
        let a = Image::filled(5, 6, 1, 0.5);
        let s = window_stats(&a, &a, 3, Padding::Reflect).unwrap();
        assert!(s.mu_x.iter().chain(&s.mu_y).all(|&m| m == 0.5));
        assert!(s.var_x.iter().chain(&s.var_y).chain(&s.cov_xy).all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_and_reverse_center_pixel() {
        let a = Image::new(3, 3, 1, (0..9).map(|i| i as f64 / 8.0).collect()).unwrap();
        let b = Image::new(3, 3, 1, (0..9).rev().map(|i| i as f64 / 8.0).collect()).unwrap();
        let s = window_stats(&a, &b, 3, Padding::Reflect).unwrap();
        let i = a.index(1, 1, 0);
        // values k/8 for k = 0..8: mean 0.5, population variance 60/576
        let expected_var = (0..9).map(|k| (k as f64 / 8.0 - 0.5).powi(2)).sum::<f64>() / 9.0;
        assert_eq!(s.mu_x[i], 0.5);
        assert_eq!(s.mu_y[i], 0.5);
        assert!((s.var_x[i] - expected_var).abs() < 1e-15);
        assert!((s.var_y[i] - expected_var).abs() < 1e-15);
        assert!((s.cov_xy[i] + expected_var).abs() < 1e-15);
    }

    #[test]
    fn matches_oracle_on_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for pad in [Padding::Reflect, Padding::Replicate] {
            for window in [1, 3, 5] {
                let a = random_image(&mut rng, 16, 16, 2);
                let b = random_image(&mut rng, 16, 16, 2);
                let s = window_stats(&a, &b, window, pad).unwrap();
                for y in 0..16 {
                    for x in 0..16 {
                        for c in 0..2 {
                            let o = oracle(&a, &b, y, x, c, window, pad);
                            let i = a.index(y, x, c);
                            let got = [s.mu_x[i], s.mu_y[i], s.var_x[i], s.var_y[i], s.cov_xy[i]];
                            for (g, e) in got.iter().zip(o) {
                                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_windows_and_shapes() {
        let a = Image::filled(4, 4, 1, 0.0);
        let b = Image::filled(4, 5, 1, 0.0);
        assert!(matches!(window_stats(&a, &b, 3, Padding::Reflect), Err(Error::Dimension(_))));
        assert!(matches!(window_stats(&a, &a, 5, Padding::Reflect), Err(Error::Dimension(_))));
        assert!(matches!(window_stats(&a, &a, 2, Padding::Reflect), Err(Error::Argument(_))));
    }

    #[test]
    fn padding_resolution() {
        assert_eq!(Padding::Reflect.resolve(-1, 4), 1);
        assert_eq!(Padding::Reflect.resolve(4, 4), 2);
        assert_eq!(Padding::Replicate.resolve(-1, 4), 0);
        assert_eq!(Padding::Replicate.resolve(4, 4), 3);
    }

    proptest! {
        #[test]
        fn swap_and_self_properties(seed in any::<u64>(), h in 3usize..9, w in 3usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, h, w, 1);
            let b = random_image(&mut rng, h, w, 1);
            let ab = window_stats(&a, &b, 3, Padding::Reflect).unwrap();
            let ba = window_stats(&b, &a, 3, Padding::Reflect).unwrap();
            prop_assert_eq!(&ab.mu_x, &ba.mu_y);
            prop_assert_eq!(&ab.var_x, &ba.var_y);
            prop_assert_eq!(&ab.cov_xy, &ba.cov_xy);
            let aa = window_stats(&a, &a, 3, Padding::Reflect).unwrap();
            for i in 0..aa.len() {
                prop_assert!((aa.cov_xy[i] - aa.var_x[i]).abs() < 1e-15);
                prop_assert_eq!(aa.var_x[i], aa.var_y[i]);
            }
            for i in 0..ab.len() {
                prop_assert!(ab.var_x[i] >= 0.0 && ab.var_y[i] >= 0.0);
                prop_assert!(ab.cov_xy[i].abs() <= (ab.var_x[i] * ab.var_y[i]).sqrt() + 1e-9);
            }
        }
    }
}
