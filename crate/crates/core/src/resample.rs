//! Upsampling: nearest replication, bilinear interpolation, and the
//! channel-to-space rearrangement of sub-pixel convolution.
//!
//! Pixel shuffle order is row-major inside each `r x r` block:
//! `out(y*r + dy, x*r + dx) = stack(y, x, dy*r + dx)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pfm;

/// A low-resolution map carrying `r^2` channels per pixel, interleaved
/// row-major like [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct StackHeader {
    h: usize,
    w: usize,
    c: usize,
}

impl ChannelStack {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        // reuse the shape checks of Image
        let img = Image::new(height, width, channels, data)?;
        Ok(ChannelStack::from(img))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Upscale factor `r` when the channel count is a perfect square.
    pub fn factor(&self) -> Option<usize> {
        let r = (self.channels as f64).sqrt().round() as usize;
        (r * r == self.channels).then_some(r)
    }

    /// Writes channel-major planes stacked vertically into a single-channel
    /// PFM, with a `{h, w, c}` JSON sidecar next to it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w, c) = (self.height, self.width, self.channels);
        let planes = Image::from_fn(h * c, w, 1, |row, x, _| self.get(row % h, x, row / h));
        pfm::write_pfm(path, &planes)?;
        let sidecar = sidecar_path(path);
        let header = serde_json::to_string(&StackHeader { h, w, c })?;
        std::fs::write(&sidecar, header).map_err(|e| Error::io(sidecar, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar = sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let header: StackHeader = serde_json::from_str(&text)?;
        let planes = pfm::read_pfm(path)?;
        if planes.shape() != (header.h * header.c, header.w, 1) {
            return Err(Error::Dimension(format!(
                "PFM of shape {:?} does not hold a {}x{}x{} stack",
                planes.shape(),
                header.h,
                header.w,
                header.c
            )));
        }
        let (h, w, c) = (header.h, header.w, header.c);
        let mut data = vec![0.0; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * c + ch] = planes.get(ch * h + y, x, 0);
                }
            }
        }
        ChannelStack::new(h, w, c, data)
    }
}

impl From<Image> for ChannelStack {
    fn from(img: Image) -> Self {
        let (height, width, channels) = img.shape();
        ChannelStack {
            height,
            width,
            channels,
            data: img.into_data(),
        }
    }
}

/// `stack.pfm` -> `stack.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn check_factor(r: usize) -> Result<()> {
    if r < 1 {
        return Err(Error::Argument("upscale factor must be at least 1".into()));
    }
    Ok(())
}

/// Replicates each pixel into an `r x r` block.
pub fn upsample_nearest(img: &Image, r: usize) -> Result<Image> {
    check_factor(r)?;
    let (h, w, c) = img.shape();
    Ok(Image::from_fn(h * r, w * r, c, |y, x, ch| img.get(y / r, x / r, ch)))
}

/// Bilinear upsampling with the half-pixel (`align_corners = false`)
/// convention: output pixel `i` samples input coordinate `(i + 0.5) / r - 0.5`,
/// clamped to the image.
pub fn upsample_bilinear(img: &Image, r: usize) -> Result<Image> {
    check_factor(r)?;
    let (h, w, c) = img.shape();
    let taps = |i: usize, n: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) / r as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    Ok(Image::from_fn(h * r, w * r, c, |y, x, ch| {
        let (y0, y1, fy) = taps(y, h);
        let (x0, x1, fx) = taps(x, w);
        let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
        let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Rearranges `r^2` channels into `r x r` spatial blocks.
pub fn pixel_shuffle(stack: &ChannelStack, r: usize) -> Result<Image> {
    check_factor(r)?;
    if stack.channels != r * r {
        return Err(Error::Dimension(format!(
            "pixel shuffle by {r} needs {} channels, stack has {}",
            r * r,
            stack.channels
        )));
    }
    Ok(Image::from_fn(stack.height * r, stack.width * r, 1, |y, x, _| {
        stack.get(y / r, x / r, (y % r) * r + x % r)
    }))
}

/// Inverse of [`pixel_shuffle`] for single-channel images.
pub fn space_to_depth(img: &Image, r: usize) -> Result<ChannelStack> {
    check_factor(r)?;
    let (h, w, c) = img.shape();
    if c != 1 {
        return Err(Error::Dimension(format!("space_to_depth expects one channel, got {c}")));
    }
    if h % r != 0 || w % r != 0 {
        return Err(Error::Dimension(format!("{h}x{w} is not divisible by {r}")));
    }
    let out = Image::from_fn(h / r, w / r, r * r, |y, x, ch| img.get(y * r + ch / r, x * r + ch % r, 0));
    Ok(ChannelStack::from(out))
}

/// Mean over non-overlapping `r x r` blocks, accumulated as a running mean
/// so that constant blocks reproduce their value exactly.
pub fn block_mean_downsample(img: &Image, r: usize) -> Result<Image> {
    check_factor(r)?;
    let (h, w, c) = img.shape();
    if h % r != 0 || w % r != 0 {
        return Err(Error::Dimension(format!("{h}x{w} is not divisible by {r}")));
    }
    Ok(Image::from_fn(h / r, w / r, c, |y, x, ch| {
        let mut mean = 0.0;
        let mut k = 0.0;
        for dy in 0..r {
            for dx in 0..r {
                k += 1.0;
                mean += (img.get(y * r + dy, x * r + dx, ch) - mean) / k;
            }
        }
        mean
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn nearest_cases() {
        let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_nearest(&img, 1).unwrap(), img);
        let one = Image::filled(1, 1, 1, 0.7);
        assert_eq!(upsample_nearest(&one, 3).unwrap(), Image::filled(3, 3, 1, 0.7));
        let up = upsample_nearest(&img, 2).unwrap();
        #[rustfmt::skip]
        let want = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &want[..]);
        assert!(matches!(upsample_nearest(&img, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn shuffle_definition() {
        let stack = ChannelStack::new(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = pixel_shuffle(&stack, 2).unwrap();
        assert_eq!(out.shape(), (2, 2, 1));
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
        let single = ChannelStack::new(2, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(pixel_shuffle(&single, 1).unwrap().data(), single.data());
        assert!(matches!(pixel_shuffle(&stack, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn shuffle_matches_index_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, w, r) = (3, 5, 3);
        let data: Vec<f64> = (0..h * w * r * r).map(|_| rng.gen()).collect();
        let stack = ChannelStack::new(h, w, r * r, data.clone()).unwrap();
        let out = pixel_shuffle(&stack, r).unwrap();
        for y in 0..h {
            for x in 0..w {
                for dy in 0..r {
                    for dx in 0..r {
                        let src = data[(y * w + x) * r * r + dy * r + dx];
                        let dst = out.data()[(y * r + dy) * (w * r) + x * r + dx];
                        assert_eq!(src, dst);
                    }
                }
            }
        }
    }

    #[test]
    fn space_to_depth_block_order() {
        let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = space_to_depth(&img, 2).unwrap();
        assert_eq!((s.height(), s.width(), s.channels()), (1, 1, 4));
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
        let odd = Image::filled(3, 4, 1, 0.0);
        assert!(matches!(space_to_depth(&odd, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn bilinear_half_pixel_convention() {
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&img, 2).unwrap();
        // sample positions -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
        let c = Image::filled(3, 3, 3, 0.4);
        assert!(upsample_bilinear(&c, 3).unwrap().data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn stack_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stack.pfm");
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.5).collect();
        let stack = ChannelStack::new(2, 3, 4, data).unwrap();
        stack.write(&path).unwrap();
        assert!(path.with_extension("json").exists());
        assert_eq!(ChannelStack::read(&path).unwrap(), stack);
    }

    proptest! {
        #[test]
        fn shuffle_is_a_bijection(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, r in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stack = ChannelStack::new(h, w, r * r, (0..h * w * r * r).map(|_| rng.gen()).collect()).unwrap();
            let img = pixel_shuffle(&stack, r).unwrap();
            prop_assert_eq!(&space_to_depth(&img, r).unwrap(), &stack);
            prop_assert_eq!(&pixel_shuffle(&space_to_depth(&img, r).unwrap(), r).unwrap(), &img);
            prop_assert_eq!(sorted(img.data().to_vec()), sorted(stack.data().to_vec()));
        }

        #[test]
        fn nearest_then_block_mean_is_identity(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, r in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Image::from_fn(h, w, 1, |_, _, _| rng.gen());
            let up = upsample_nearest(&img, r).unwrap();
            prop_assert_eq!(up.len(), img.len() * r * r);
            for v in img.data() {
                let before = img.data().iter().filter(|&u| u == v).count();
                let after = up.data().iter().filter(|&u| u == v).count();
                prop_assert_eq!(after, before * r * r);
            }
            prop_assert_eq!(block_mean_downsample(&up, r).unwrap(), img);
        }
    }
}
