//! Pixel-domain post-processing attacks and the filter-based restorer.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF32;

/// One post-processing attack and its intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackKind {
    /// Blockwise DCT quantization at a JPEG quality factor in 1..=100.
    JpegProxy { quality: u8 },
    /// Keeps a random rectangle covering `fraction` of the area, zeroes the rest.
    Crop { fraction: f64 },
    /// Zeroes a random rectangle covering `fraction` of the area.
    Drop { fraction: f64 },
    GaussianBlur { sigma: f64 },
    /// Odd square window.
    MedianFilter { kernel: usize },
    GaussianNoise { sigma: f64 },
    /// Per-pixel probability of being forced to black or white.
    SaltPepper { p: f64 },
    /// Bilinear downscale by `scale`, then back up to the original size.
    Resize { scale: f64 },
    Brightness { factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub kind: AttackKind,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, seed: u64) -> Self {
        AttackSpec { kind, seed }
    }

    /// Stable short label such as `crop_0.5`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::JpegProxy { quality } => format!("jpeg_{quality}"),
            AttackKind::Crop { fraction } => format!("crop_{fraction}"),
            AttackKind::Drop { fraction } => format!("drop_{fraction}"),
            AttackKind::GaussianBlur { sigma } => format!("blur_{sigma}"),
            AttackKind::MedianFilter { kernel } => format!("median_{kernel}"),
            AttackKind::GaussianNoise { sigma } => format!("noise_{sigma}"),
            AttackKind::SaltPepper { p } => format!("salt_pepper_{p}"),
            AttackKind::Resize { scale } => format!("resize_{scale}"),
            AttackKind::Brightness { factor } => format!("brightness_{factor}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(format!("{}: {what}", self.label())));
        match self.kind {
            AttackKind::JpegProxy { quality } if !(1..=100).contains(&quality) => bad("quality must be in 1..=100"),
            AttackKind::Crop { fraction } if !(fraction > 0.0 && fraction <= 1.0) => bad("fraction must be in (0, 1]"),
            AttackKind::Drop { fraction } if !(0.0..1.0).contains(&fraction) => bad("fraction must be in [0, 1)"),
            AttackKind::GaussianBlur { sigma } | AttackKind::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad("sigma must be finite and non-negative")
            }
            AttackKind::MedianFilter { kernel } if kernel == 0 || kernel % 2 == 0 => bad("kernel must be odd"),
            AttackKind::SaltPepper { p } if !(0.0..=1.0).contains(&p) => bad("p must be in [0, 1]"),
            AttackKind::Resize { scale } if !(scale > 0.0 && scale <= 1.0) => bad("scale must be in (0, 1]"),
            AttackKind::Brightness { factor } if !(factor >= 0.0 && factor.is_finite()) => bad("factor must be finite and non-negative"),
            _ => Ok(()),
        }
    }
}

/// The nine attacks at their default intensities.
pub fn default_suite(seed: u64) -> Vec<AttackSpec> {
    [
        AttackKind::JpegProxy { quality: 75 },
        AttackKind::Crop { fraction: 0.5 },
        AttackKind::Drop { fraction: 0.3 },
        AttackKind::GaussianBlur { sigma: 2.0 },
        AttackKind::MedianFilter { kernel: 5 },
        AttackKind::GaussianNoise { sigma: 0.1 },
        AttackKind::SaltPepper { p: 0.1 },
        AttackKind::Resize { scale: 0.5 },
        AttackKind::Brightness { factor: 2.0 },
    ]
    .into_iter()
    .enumerate()
    .map(|(i, kind)| AttackSpec::new(kind, seed.wrapping_add(i as u64)))
    .collect()
}

pub fn apply_attack(image: &ImageF32, spec: &AttackSpec) -> Result<ImageF32> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out = match spec.kind {
        AttackKind::JpegProxy { quality } => jpeg_proxy(image, quality)?,
        AttackKind::Crop { fraction } => {
            if fraction == 1.0 {
                return Ok(image.clone());
            }
            let (y0, x0, h, w) = random_rect(image, fraction, &mut rng);
            map_pixels(image, |y, x, v| if (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x) { v } else { 0.0 })
        }
        AttackKind::Drop { fraction } => {
            if fraction == 0.0 {
                return Ok(image.clone());
            }
            let (y0, x0, h, w) = random_rect(image, fraction, &mut rng);
            map_pixels(image, |y, x, v| if (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x) { 0.0 } else { v })
        }
        AttackKind::GaussianBlur { sigma } => gaussian_blur(image, sigma),
        AttackKind::MedianFilter { kernel } => median_filter(image, kernel),
        AttackKind::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                return Ok(image.clone());
            }
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            let data = image.data().iter().map(|&v| v + normal.sample(&mut rng) as f32).collect();
            ImageF32::new(image.height(), image.width(), image.channels(), data)?
        }
        AttackKind::SaltPepper { p } => {
            let mut out = image.clone();
            for y in 0..image.height() {
                for x in 0..image.width() {
                    if rng.random::<f64>() < p {
                        let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                        (0..image.channels()).for_each(|c| out.set(y, x, c, v));
                    }
                }
            }
            out
        }
        AttackKind::Resize { scale } => {
            if scale == 1.0 {
                return Ok(image.clone());
            }
            let (h, w) = (image.height(), image.width());
            let sh = ((h as f64 * scale).round() as usize).max(1);
            let sw = ((w as f64 * scale).round() as usize).max(1);
            bilinear(&bilinear(image, sh, sw)?, h, w)?
        }
        AttackKind::Brightness { factor } => {
            if factor == 1.0 {
                return Ok(image.clone());
            }
            map_pixels(image, |_, _, v| v * factor as f32)
        }
    };
    Ok(out.clamped())
}

/// Rectangle of roughly `fraction` of the image area with the image's aspect ratio.
fn random_rect(image: &ImageF32, fraction: f64, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let side = fraction.sqrt();
    let h = ((image.height() as f64 * side).round() as usize).clamp(1, image.height());
    let w = ((image.width() as f64 * side).round() as usize).clamp(1, image.width());
    let y0 = rng.random_range(0..=image.height() - h);
    let x0 = rng.random_range(0..=image.width() - w);
    (y0, x0, h, w)
}

fn map_pixels(image: &ImageF32, f: impl Fn(usize, usize, f32) -> f32) -> ImageF32 {
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..image.channels() {
                out.set(y, x, c, f(y, x, image.get(y, x, c)));
            }
        }
    }
    out
}

/// Separable Gaussian blur with replicated borders and a radius of `ceil(3 sigma)`.
pub fn gaussian_blur(image: &ImageF32, sigma: f64) -> ImageF32 {
    if sigma == 0.0 {
        return image.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (h, w) = (image.height() as isize, image.width() as isize);
    let pass = |src: &ImageF32, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..src.channels() {
                    let mut acc = 0.0;
                    for (i, kv) in (-r..=r).zip(&k) {
                        let (yy, xx) = if horizontal { (y, (x + i).clamp(0, w - 1)) } else { ((y + i).clamp(0, h - 1), x) };
                        acc += kv * src.get(yy as usize, xx as usize, c) as f64;
                    }
                    out.set(y as usize, x as usize, c, acc as f32);
                }
            }
        }
        out
    };
    pass(&pass(image, true), false)
}

/// Per-channel median over a `kernel`×`kernel` window with replicated borders.
pub fn median_filter(image: &ImageF32, kernel: usize) -> ImageF32 {
    if kernel <= 1 {
        return image.clone();
    }
    let r = (kernel / 2) as isize;
    let (h, w) = (image.height() as isize, image.width() as isize);
    let mut out = image.clone();
    let mut window = Vec::with_capacity(kernel * kernel);
    for y in 0..h {
        for x in 0..w {
            for c in 0..image.channels() {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = ((y + dy).clamp(0, h - 1), (x + dx).clamp(0, w - 1));
                        window.push(image.get(yy as usize, xx as usize, c));
                    }
                }
                window.sort_by(f32::total_cmp);
                out.set(y as usize, x as usize, c, window[window.len() / 2]);
            }
        }
    }
    out
}

/// Bilinear resampling with pixel-centre alignment.
pub fn bilinear(image: &ImageF32, height: usize, width: usize) -> Result<ImageF32> {
    if height == 0 || width == 0 {
        return Err(Error::config("resize target must be non-empty"));
    }
    let (h, w) = (image.height(), image.width());
    let coord = |o: usize, out_n: usize, in_n: usize| {
        let p = ((o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5).clamp(0.0, (in_n - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(in_n - 1), p - i0 as f64)
    };
    let mut data = Vec::with_capacity(height * width * image.channels());
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, h);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, w);
            for c in 0..image.channels() {
                let g = |yy, xx| image.get(yy, xx, c) as f64;
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
                let bottom = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    ImageF32::new(height, width, image.channels(), data)
}

/// Standard JPEG luminance quantization table, row-major.
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51,
    87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled the way libjpeg scales it for `quality`.
pub fn quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &t) in out.iter_mut().zip(&LUMA_QUANT) {
        *o = ((t as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) as f64 * u as f64 * PI) / 16.0).cos();
        }
    }
    m
}

/// Orthonormal 2-D DCT-II of an 8×8 block.
pub fn dct8(block: &[f64; 64]) -> [f64; 64] {
    let m = dct_basis();
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += m[u][y] * m[v][x] * block[y * 8 + x];
                }
            }
            out[u * 8 + v] = acc;
        }
    }
    out
}

/// Inverse of [`dct8`].
pub fn idct8(coeffs: &[f64; 64]) -> [f64; 64] {
    let m = dct_basis();
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                for v in 0..8 {
                    acc += m[u][y] * m[v][x] * coeffs[u * 8 + v];
                }
            }
            out[y * 8 + x] = acc;
        }
    }
    out
}

/// Each channel is cut into 8×8 blocks (edges replicated), level-shifted to
/// [-128, 127], DCT-quantized with the scaled luminance table and rebuilt.
pub fn jpeg_proxy(image: &ImageF32, quality: u8) -> Result<ImageF32> {
    if !(1..=100).contains(&quality) {
        return Err(Error::config(format!("jpeg quality must be in 1..=100, got {quality}")));
    }
    let table = quant_table(quality);
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for c in 0..image.channels() {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for (i, v) in block.iter_mut().enumerate() {
                    let (y, x) = ((by + i / 8).min(h - 1), (bx + i % 8).min(w - 1));
                    *v = image.get(y, x, c) as f64 * 255.0 - 128.0;
                }
                let mut coeffs = dct8(&block);
                for (q, t) in coeffs.iter_mut().zip(&table) {
                    *q = (*q / t).round() * t;
                }
                let rebuilt = idct8(&coeffs);
                for (i, v) in rebuilt.iter().enumerate() {
                    let (y, x) = (by + i / 8, bx + i % 8);
                    if y < h && x < w {
                        out.set(y, x, c, ((v + 128.0) / 255.0) as f32);
                    }
                }
            }
        }
    }
    Ok(out.clamped())
}

pub const RESTORE_MEDIAN_KERNEL: usize = 3;
pub const RESTORE_SHARPEN_SIGMA: f64 = 1.0;
pub const RESTORE_SHARPEN_AMOUNT: f32 = 0.5;

/// 3×3 median denoise followed by an unsharp mask.
pub fn restoration_attack(degraded: &ImageF32) -> ImageF32 {
    let denoised = median_filter(degraded, RESTORE_MEDIAN_KERNEL);
    let blurred = gaussian_blur(&denoised, RESTORE_SHARPEN_SIGMA);
    let data = denoised
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(&d, &b)| d + RESTORE_SHARPEN_AMOUNT * (d - b))
        .collect();
    ImageF32::new(degraded.height(), degraded.width(), degraded.channels(), data).expect("same dims").clamped()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::metrics::psnr;

    fn sample(seed: u64) -> ImageF32 {
        generate_dataset(&DatasetSpec { count: 1, seed, ..Default::default() }).unwrap().remove(0)
    }

    fn bit_same(a: &ImageF32, b: &ImageF32) -> bool {
        a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn neutral_parameters_are_exact_no_ops() {
        let img = sample(3);
        for kind in [
            AttackKind::Brightness { factor: 1.0 },
            AttackKind::Resize { scale: 1.0 },
            AttackKind::Crop { fraction: 1.0 },
            AttackKind::Drop { fraction: 0.0 },
            AttackKind::GaussianNoise { sigma: 0.0 },
            AttackKind::GaussianBlur { sigma: 0.0 },
            AttackKind::MedianFilter { kernel: 1 },
            AttackKind::SaltPepper { p: 0.0 },
        ] {
            assert!(bit_same(&apply_attack(&img, &AttackSpec::new(kind, 4)).unwrap(), &img), "{kind:?}");
        }
    }

    #[test]
    fn default_suite_matches_published_intensities() {
        let labels: Vec<String> = default_suite(0).iter().map(AttackSpec::label).collect();
        assert_eq!(
            labels,
            ["jpeg_75", "crop_0.5", "drop_0.3", "blur_2", "median_5", "noise_0.1", "salt_pepper_0.1", "resize_0.5", "brightness_2"]
        );
    }

    #[test]
    fn out_of_range_parameters_rejected() {
        let img = sample(1);
        for kind in [
            AttackKind::Crop { fraction: 0.0 },
            AttackKind::Crop { fraction: 1.5 },
            AttackKind::JpegProxy { quality: 0 },
            AttackKind::MedianFilter { kernel: 4 },
            AttackKind::SaltPepper { p: -0.1 },
            AttackKind::Resize { scale: 2.0 },
        ] {
            assert!(matches!(apply_attack(&img, &AttackSpec::new(kind, 0)), Err(Error::Config(_))), "{kind:?}");
        }
    }

    #[test]
    fn attacks_are_seed_deterministic_and_bounded() {
        let img = sample(5);
        for spec in default_suite(9) {
            let a = apply_attack(&img, &spec).unwrap();
            assert!(bit_same(&a, &apply_attack(&img, &spec).unwrap()), "{}", spec.label());
            assert_eq!(a.dims(), img.dims());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn noise_std_on_constant_image() {
        // Mid-grey keeps 5 sigma inside [0, 1], so clipping never triggers.
        let img = ImageF32::filled(64, 64, 3, 0.5);
        let out = apply_attack(&img, &AttackSpec::new(AttackKind::GaussianNoise { sigma: 0.1 }, 11)).unwrap();
        let n = out.data().len() as f64;
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (out.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.01, "{std}");
    }

    #[test]
    fn crop_keeps_half_the_area() {
        let img = ImageF32::filled(32, 32, 3, 1.0);
        let out = apply_attack(&img, &AttackSpec::new(AttackKind::Crop { fraction: 0.5 }, 2)).unwrap();
        let kept = out.data().iter().filter(|&&v| v > 0.0).count() as f64 / out.data().len() as f64;
        assert!((kept - 0.5).abs() < 0.05, "{kept}");
        let out = apply_attack(&img, &AttackSpec::new(AttackKind::Drop { fraction: 0.3 }, 2)).unwrap();
        let dropped = out.data().iter().filter(|&&v| v == 0.0).count() as f64 / out.data().len() as f64;
        assert!((dropped - 0.3).abs() < 0.05, "{dropped}");
    }

    #[test]
    fn dct_round_trip() {
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 37) % 255) as f64 - 128.0);
        let back = idct8(&dct8(&block));
        assert!(block.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn dct_of_constant_block_is_dc_only() {
        let coeffs = dct8(&[10.0; 64]);
        assert!((coeffs[0] - 80.0).abs() < 1e-9);
        assert!(coeffs[1..].iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn quant_table_scaling() {
        assert!(quant_table(100).iter().all(|&q| q == 1.0));
        assert_eq!(quant_table(50)[0], 16.0);
        assert_eq!(quant_table(75)[0], 8.0);
        assert_eq!(quant_table(10)[0], 80.0);
    }

    #[test]
    fn jpeg_quality_ordering() {
        let img = sample(8);
        let p100 = psnr(&img, &jpeg_proxy(&img, 100).unwrap()).unwrap();
        let p75 = psnr(&img, &jpeg_proxy(&img, 75).unwrap()).unwrap();
        let p10 = psnr(&img, &jpeg_proxy(&img, 10).unwrap()).unwrap();
        assert!(p100 >= 45.0, "{p100}");
        assert!(p10 < p75, "{p10} >= {p75}");
    }

    #[test]
    fn bilinear_preserves_constants() {
        let img = ImageF32::filled(32, 32, 3, 0.25);
        let small = bilinear(&img, 16, 16).unwrap();
        assert!(small.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn median_removes_isolated_spike() {
        let mut img = ImageF32::filled(5, 5, 1, 0.0);
        img.set(2, 2, 0, 1.0);
        assert!(median_filter(&img, 3).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn restoration_is_near_neutral_on_clean_images() {
        for seed in 0..12 {
            let img = sample(seed);
            let p = psnr(&img, &restoration_attack(&img)).unwrap();
            assert!(p >= 30.0, "seed {seed}: {p}");
        }
    }
}
