//! Gaussian filtering, frequency decomposition and the two class-consistency
//! fusers (pixel-mask and low-band).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `H × W × C` image, channel-interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid("image dimensions must be at least 1"));
        }
        if data.len() != height * width * channels {
            return Err(invalid(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("image has non-finite values"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamped(&self) -> ImageGrid {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn zip(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> Result<ImageGrid> {
        same_shape(self, other)?;
        Ok(ImageGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn mse(&self, other: &ImageGrid) -> Result<f64> {
        same_shape(self, other)?;
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}

fn same_shape(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(invalid(format!(
            "image shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub beta: f64,
    pub sigma_mask: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub sigma_lp: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            sigma_mask: 3.0,
            gamma1: 1.0,
            gamma2: 1.0,
            sigma_lp: 5.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_mask", self.sigma_mask), ("sigma_lp", self.sigma_lp)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("fusion.{name} must be positive")));
            }
        }
        for (name, v) in [("beta", self.beta), ("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !v.is_finite() {
                return Err(invalid(format!("fusion.{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian kernel of radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|v| v / total).collect())
}

/// Half-sample symmetric reflection of an index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

/// Separable Gaussian blur, per channel, reflecting at the edges.
pub fn gaussian_lowpass(img: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let (h, w, c) = img.shape();
    let mut tmp = ImageGrid::filled(h, w, c, 0.0)?;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    acc += kv * img.get(y, xx, ch);
                }
                tmp.set(y, x, ch, acc);
            }
        }
    }
    let mut out = ImageGrid::filled(h, w, c, 0.0)?;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    acc += kv * tmp.get(yy, x, ch);
                }
                out.set(y, x, ch, acc);
            }
        }
    }
    Ok(out)
}

/// `(low, high)` with `low = blur(img)` and `high = img − low`.
pub fn frequency_decompose(img: &ImageGrid, sigma: f64) -> Result<(ImageGrid, ImageGrid)> {
    let low = gaussian_lowpass(img, sigma)?;
    let high = img.zip(&low, |a, b| a - b)?;
    Ok((low, high))
}

/// Mask `clamp(blur(| |real − inv| − β|edited − inv| |, σ_mask))`.
pub fn fusion_mask(real: &ImageGrid, inv: &ImageGrid, edited: &ImageGrid, cfg: &FusionConfig) -> Result<ImageGrid> {
    cfg.validate()?;
    same_shape(real, inv)?;
    same_shape(real, edited)?;
    let a = real.zip(inv, |r, i| (r - i).abs())?;
    let b = edited.zip(inv, |e, i| (e - i).abs())?;
    let diff = a.zip(&b, |x, y| (x - cfg.beta * y).abs())?;
    Ok(gaussian_lowpass(&diff, cfg.sigma_mask)?.clamped())
}

/// `clamp(edited + mask ⊙ real)`.
pub fn pixel_fuse(real: &ImageGrid, inv: &ImageGrid, edited: &ImageGrid, cfg: &FusionConfig) -> Result<ImageGrid> {
    let mask = fusion_mask(real, inv, edited, cfg)?;
    let added = mask.zip(real, |m, r| m * r)?;
    Ok(edited.zip(&added, |e, a| e + a)?.clamped())
}

/// `high(edited) + γ1·low(edited) + low(real) − γ2·low(inv)` before clamping.
pub fn frequency_fuse_unclamped(
    real: &ImageGrid,
    inv: &ImageGrid,
    edited: &ImageGrid,
    cfg: &FusionConfig,
) -> Result<ImageGrid> {
    cfg.validate()?;
    same_shape(real, inv)?;
    same_shape(real, edited)?;
    let (low_e, high_e) = frequency_decompose(edited, cfg.sigma_lp)?;
    let low_r = gaussian_lowpass(real, cfg.sigma_lp)?;
    let low_i = gaussian_lowpass(inv, cfg.sigma_lp)?;
    let mut out = high_e;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += cfg.gamma1 * low_e.data[i] + low_r.data[i] - cfg.gamma2 * low_i.data[i];
    }
    Ok(out)
}

/// Low-band fusion, clamped to `[0, 1]`.
pub fn frequency_fuse(real: &ImageGrid, inv: &ImageGrid, edited: &ImageGrid, cfg: &FusionConfig) -> Result<ImageGrid> {
    Ok(frequency_fuse_unclamped(real, inv, edited, cfg)?.clamped())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn max_diff(a: &ImageGrid, b: &ImageGrid) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn kernel_is_normalized_with_expected_radius() {
        for sigma in [0.3, 1.0, 2.5, 5.0, 11.7] {
            let k = gaussian_kernel(sigma).unwrap();
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = ImageGrid::filled(7, 9, 2, 5.0).unwrap();
        let low = gaussian_lowpass(&img, 2.0).unwrap();
        assert!(low.data().iter().all(|v| (v - 5.0).abs() < 1e-9));
    }

    #[test]
    fn impulse_gives_kernel_outer_product() {
        let mut img = ImageGrid::filled(21, 21, 1, 0.0).unwrap();
        img.set(10, 10, 0, 1.0);
        let sigma = 1.5;
        let k = gaussian_kernel(sigma).unwrap();
        let r = (k.len() / 2) as isize;
        let low = gaussian_lowpass(&img, sigma).unwrap();
        for y in 0..21 {
            for x in 0..21 {
                let dy = y as isize - 10;
                let dx = x as isize - 10;
                let want = if dy.abs() <= r && dx.abs() <= r {
                    k[(dy + r) as usize] * k[(dx + r) as usize]
                } else {
                    0.0
                };
                assert!((low.get(y, x, 0) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blurs_compose_like_gaussians() {
        let img = gaussian_lowpass(&random_image(40, 40, 1, 3), 1.0).unwrap();
        let (s1, s2) = (1.5, 2.0);
        let twice = gaussian_lowpass(&gaussian_lowpass(&img, s1).unwrap(), s2).unwrap();
        let once = gaussian_lowpass(&img, (s1 * s1 + s2 * s2).sqrt()).unwrap();
        let mae = twice.data().iter().zip(once.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / img.data().len() as f64;
        assert!(mae < 1e-3, "mae {mae}");
    }

    #[test]
    fn decomposition_is_additive() {
        let img = random_image(12, 10, 3, 4);
        let (low, high) = frequency_decompose(&img, 2.0).unwrap();
        let back = low.zip(&high, |a, b| a + b).unwrap();
        assert!(max_diff(&back, &img) < 1e-12);
        let flat = ImageGrid::filled(5, 5, 1, 0.3).unwrap();
        let (_, h) = frequency_decompose(&flat, 5.0).unwrap();
        assert!(h.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn nyquist_checkerboard_is_removed() {
        let (h, w) = (32, 32);
        let img = ImageGrid::new(h, w, 1, (0..h * w).map(|i| ((i / w + i % w) % 2) as f64).collect()).unwrap();
        let (low, _) = frequency_decompose(&img, 5.0).unwrap();
        let mean = 0.5;
        let num: f64 = low.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        let den: f64 = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        assert!(num < 0.01 * den);
    }

    #[test]
    fn identical_triple_is_fixed_point() {
        let img = random_image(8, 8, 1, 5);
        let cfg = FusionConfig::default();
        let m = fusion_mask(&img, &img, &img, &cfg).unwrap();
        assert!(m.data().iter().all(|v| *v == 0.0));
        assert_eq!(pixel_fuse(&img, &img, &img, &cfg).unwrap(), img);
        assert!(max_diff(&frequency_fuse(&img, &img, &img, &cfg).unwrap(), &img) < 1e-9);
    }

    #[test]
    fn zero_beta_mask_is_blurred_difference() {
        let real = random_image(9, 9, 1, 6);
        let inv = random_image(9, 9, 1, 7);
        let cfg = FusionConfig { beta: 0.0, ..FusionConfig::default() };
        let m = fusion_mask(&real, &inv, &inv, &cfg).unwrap();
        let want = gaussian_lowpass(&real.zip(&inv, |a, b| (a - b).abs()).unwrap(), cfg.sigma_mask)
            .unwrap()
            .clamped();
        assert!(max_diff(&m, &want) < 1e-15);
    }

    #[test]
    fn pixel_fuse_matches_per_pixel_evaluation() {
        let (real, inv, edited) = (random_image(10, 11, 3, 8), random_image(10, 11, 3, 9), random_image(10, 11, 3, 10));
        let cfg = FusionConfig { beta: 0.7, sigma_mask: 1.2, ..FusionConfig::default() };
        let fused = pixel_fuse(&real, &inv, &edited, &cfg).unwrap();

        let k = gaussian_kernel(cfg.sigma_mask).unwrap();
        let r = (k.len() / 2) as isize;
        let refl = |i: isize, n: isize| -> usize {
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i >= n {
                    i = 2 * n - 1 - i;
                } else {
                    return i as usize;
                }
            }
        };
        let diff = |y: usize, x: usize, c: usize| {
            ((real.get(y, x, c) - inv.get(y, x, c)).abs() - cfg.beta * (edited.get(y, x, c) - inv.get(y, x, c)).abs()).abs()
        };
        for y in 0..10 {
            for x in 0..11 {
                for c in 0..3 {
                    let mut m = 0.0;
                    for (a, ka) in k.iter().enumerate() {
                        for (b, kb) in k.iter().enumerate() {
                            let yy = refl(y as isize + a as isize - r, 10);
                            let xx = refl(x as isize + b as isize - r, 11);
                            m += ka * kb * diff(yy, xx, c);
                        }
                    }
                    let want = (edited.get(y, x, c) + m.clamp(0.0, 1.0) * real.get(y, x, c)).clamp(0.0, 1.0);
                    assert!((fused.get(y, x, c) - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn perfect_inversion_leaves_edit_untouched() {
        let real = random_image(12, 12, 1, 11);
        let edited = random_image(12, 12, 1, 12);
        let cfg = FusionConfig::default();
        let f = frequency_fuse_unclamped(&real, &real, &edited, &cfg).unwrap();
        assert!(max_diff(&f, &edited) < 1e-9);
    }

    #[test]
    fn frequency_fuse_keeps_high_band() {
        let (real, inv, edited) = (random_image(14, 12, 1, 13), random_image(14, 12, 1, 14), random_image(14, 12, 1, 15));
        let cfg = FusionConfig { sigma_lp: 1.5, ..FusionConfig::default() };
        let f = frequency_fuse_unclamped(&real, &inv, &edited, &cfg).unwrap();
        let (_, hf) = frequency_decompose(&f, cfg.sigma_lp).unwrap();
        let (low_e, he) = frequency_decompose(&edited, cfg.sigma_lp).unwrap();
        let low_r = gaussian_lowpass(&real, cfg.sigma_lp).unwrap();
        let low_i = gaussian_lowpass(&inv, cfg.sigma_lp).unwrap();
        let mut built = he.clone();
        for (i, v) in built.data_mut().iter_mut().enumerate() {
            *v += low_e.data()[i] + low_r.data()[i] - low_i.data()[i];
        }
        assert!(max_diff(&built, &f) < 1e-12);
        // Re-filtering the fused image also sees the blurred corrections.
        let corr = f.zip(&edited, |a, b| a - b).unwrap();
        let (_, hc) = frequency_decompose(&corr, cfg.sigma_lp).unwrap();
        let back = he.zip(&hc, |a, b| a + b).unwrap();
        assert!(max_diff(&hf, &back) < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = random_image(4, 4, 1, 1);
        let b = random_image(4, 5, 1, 2);
        let cfg = FusionConfig::default();
        assert!(pixel_fuse(&a, &a, &b, &cfg).is_err());
        assert!(frequency_fuse(&a, &b, &a, &cfg).is_err());
    }
}
