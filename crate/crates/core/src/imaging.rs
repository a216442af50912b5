//! Raster I/O, resampling and whole-image augmentation.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RescaleFilter {
    #[default]
    Bilinear,
    Nearest,
}

/// Loads an RGB image as a `3 × H × W` tensor with values in `[0, 1]`.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

/// Writes a `[0, 1]`-valued RGB tensor as an 8-bit PNG.
pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if t.channels != 3 {
        return Err(Error::Shape(format!("PNG export needs 3 channels, got {}", t.channels)));
    }
    let img = ImageBuffer::from_fn(t.width as u32, t.height as u32, |x, y| {
        let px = |c| (t.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path.as_ref())?;
    Ok(())
}

pub fn normalize(t: &mut Tensor, mean: &[f64; 3], std: &[f64; 3]) {
    let plane = t.height * t.width;
    for (c, chunk) in t.data.chunks_mut(plane).enumerate().take(3) {
        for v in chunk {
            *v = (*v - mean[c]) / std[c];
        }
    }
}

pub fn denormalize(t: &mut Tensor, mean: &[f64; 3], std: &[f64; 3]) {
    let plane = t.height * t.width;
    for (c, chunk) in t.data.chunks_mut(plane).enumerate().take(3) {
        for v in chunk {
            *v = *v * std[c] + mean[c];
        }
    }
}

/// Resamples to `out_h × out_w` using half-pixel centres. Resizing to the
/// same shape returns an exact copy.
pub fn resize(t: &Tensor, out_h: usize, out_w: usize, filter: RescaleFilter) -> Tensor {
    if (out_h, out_w) == (t.height, t.width) {
        return t.clone();
    }
    let mut out = Tensor::zeros(t.channels, out_h, out_w);
    let sy = t.height as f64 / out_h as f64;
    let sx = t.width as f64 / out_w as f64;
    match filter {
        RescaleFilter::Nearest => {
            for c in 0..t.channels {
                for y in 0..out_h {
                    let iy = (((y as f64 + 0.5) * sy) as usize).min(t.height - 1);
                    for x in 0..out_w {
                        let ix = (((x as f64 + 0.5) * sx) as usize).min(t.width - 1);
                        out.set(c, y, x, t.get(c, iy, ix));
                    }
                }
            }
        }
        RescaleFilter::Bilinear => {
            let taps = |len: usize, scale: f64, i: usize| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, src - lo as f64)
            };
            let xt: Vec<_> = (0..out_w).map(|x| taps(t.width, sx, x)).collect();
            for c in 0..t.channels {
                for y in 0..out_h {
                    let (y0, y1, fy) = taps(t.height, sy, y);
                    for (x, &(x0, x1, fx)) in xt.iter().enumerate() {
                        let top = t.get(c, y0, x0) * (1.0 - fx) + t.get(c, y0, x1) * fx;
                        let bottom = t.get(c, y1, x0) * (1.0 - fx) + t.get(c, y1, x1) * fx;
                        out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
                    }
                }
            }
        }
    }
    out
}

pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for c in 0..t.channels {
        for y in 0..t.height {
            for x in 0..t.width {
                out.set(c, y, x, t.get(c, y, t.width - 1 - x));
            }
        }
    }
    out
}

pub fn flip_vertical(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for c in 0..t.channels {
        for y in 0..t.height {
            for x in 0..t.width {
                out.set(c, y, x, t.get(c, t.height - 1 - y, x));
            }
        }
    }
    out
}

/// Rotates counter-clockwise by `quarter_turns × 90°`.
pub fn rotate90(t: &Tensor, quarter_turns: usize) -> Tensor {
    let mut cur = t.clone();
    for _ in 0..quarter_turns % 4 {
        let mut next = Tensor::zeros(cur.channels, cur.width, cur.height);
        for c in 0..cur.channels {
            for y in 0..cur.height {
                for x in 0..cur.width {
                    next.set(c, cur.width - 1 - x, y, cur.get(c, y, x));
                }
            }
        }
        cur = next;
    }
    cur
}

/// Whole-image augmentation applied before any tiling: random flips, a
/// random quarter-turn rotation, a random square crop, resize, normalize.
/// No colour transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Probability of applying each individual transform.
    pub probability: f64,
    pub crop_scale: [f64; 2],
    pub image_side: usize,
    pub filter: RescaleFilter,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.5,
            crop_scale: [0.8, 1.0],
            image_side: 222,
            filter: RescaleFilter::Bilinear,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    /// Deterministic evaluation transform: resize and normalize only.
    pub fn eval_transform(&self, raw: &Tensor) -> Tensor {
        let mut t = resize(raw, self.image_side, self.image_side, self.filter);
        normalize(&mut t, &self.mean, &self.std);
        t
    }

    pub fn train_transform<R: Rng + ?Sized>(&self, raw: &Tensor, rng: &mut R) -> Tensor {
        if !self.enabled {
            return self.eval_transform(raw);
        }
        let p = self.probability;
        let mut t = raw.clone();
        if rng.gen_bool(p) {
            t = flip_vertical(&t);
        }
        if rng.gen_bool(p) {
            t = flip_horizontal(&t);
        }
        if rng.gen_bool(p) {
            t = rotate90(&t, rng.gen_range(0..4));
        }
        if rng.gen_bool(p) {
            let scale = rng.gen_range(self.crop_scale[0]..=self.crop_scale[1]);
            let side = t.height.min(t.width);
            let crop = ((scale * side as f64) as usize).clamp(1, side);
            let y = rng.gen_range(0..=t.height - crop);
            let x = rng.gen_range(0..=t.width - crop);
            t = t.crop(y, x, crop, crop).expect("crop lies inside the image");
        }
        let mut t = resize(&t, self.image_side, self.image_side, self.filter);
        normalize(&mut t, &self.mean, &self.std);
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn geometric_transforms_invert() {
        let t = ramp(3, 4, 5);
        assert_eq!(flip_horizontal(&flip_horizontal(&t)), t);
        assert_eq!(flip_vertical(&flip_vertical(&t)), t);
        assert_eq!(rotate90(&t, 4), t);
        assert_eq!(rotate90(&rotate90(&t, 1), 3), t);
        assert_eq!(rotate90(&t, 1).shape(), (3, 5, 4));
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = ramp(1, 6, 6);
        assert_eq!(resize(&t, 6, 6, RescaleFilter::Bilinear), t);
        let flat = Tensor::from_vec(1, 5, 5, vec![0.25; 25]).unwrap();
        for f in [RescaleFilter::Bilinear, RescaleFilter::Nearest] {
            let r = resize(&flat, 9, 9, f);
            assert!(r.data.iter().all(|v| (*v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn normalize_round_trip() {
        let mut t = Tensor::from_vec(3, 2, 2, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let orig = t.clone();
        normalize(&mut t, &IMAGENET_MEAN, &IMAGENET_STD);
        denormalize(&mut t, &IMAGENET_MEAN, &IMAGENET_STD);
        for (a, b) in t.data.iter().zip(&orig.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_transform_has_target_side() {
        let cfg = AugmentConfig {
            image_side: 36,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw = ramp(3, 40, 40);
        for _ in 0..20 {
            assert_eq!(cfg.train_transform(&raw, &mut rng).shape(), (3, 36, 36));
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let t = Tensor::from_vec(3, 3, 2, (0..18).map(|i| i as f64 / 255.0).collect()).unwrap();
        save_png(&t, &path).unwrap();
        let back = load_rgb(&path).unwrap();
        for (a, b) in t.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
