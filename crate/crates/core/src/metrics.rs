//! PSNR, SSIM, the feature-set Fréchet distance (FD-proxy) and bit accuracy.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::image::ImageF32;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const DIAGONAL_LOADING: f64 = 1e-6;

pub fn mse(a: &ImageF32, b: &ImageF32) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio for `[0, 1]` images, capped at 99 dB.
pub fn psnr(a: &ImageF32, b: &ImageF32) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-window separable Gaussian filter of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity on luma with an 11×11 Gaussian window.
pub fn ssim(a: &ImageF32, b: &ImageF32) -> Result<f64> {
    a.same_dims(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let (x, y) = (a.luminance(), b.luminance());
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let myy = filter_valid(&prod(&y, &y), h, w, &taps);
    let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

fn gaussian_fit(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
    }
    for i in 0..d {
        cov[(i, i)] += DIAGONAL_LOADING;
    }
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if a[0].len() != b[0].len() {
        return Err(Error::config("embedding widths differ"));
    }
    let (ma, ca) = gaussian_fit(a);
    let (mb, cb) = gaussian_fit(b);
    let sa = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&sa * &cb * &sa));
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// FD-proxy between two image sets.
pub fn feature_distance(extractor: &FeatureExtractor, a: &[ImageF32], b: &[ImageF32]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDataset);
    }
    frechet_distance(&extractor.embed(a)?, &extractor.embed(b)?)
}

pub fn bit_accuracy(expected: &[bool], actual: &[bool]) -> Result<f64> {
    if expected.len() != actual.len() {
        return Err(Error::config(format!("bit vectors differ in length: {} vs {}", expected.len(), actual.len())));
    }
    if expected.is_empty() {
        return Err(Error::config("empty bit vectors"));
    }
    let hits = expected.iter().zip(actual).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / expected.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Ori,
    WrongKey,
    NoFuser,
    Removal,
    Restored,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Ori => "ori",
            Condition::WrongKey => "wrong_key",
            Condition::NoFuser => "no_fuser",
            Condition::Removal => "removal",
            Condition::Restored => "restored",
        }
    }
}

/// Quality of one decode condition; `subject` is measured against `reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub condition: Condition,
    pub subject: String,
    pub reference: String,
    pub psnr: f64,
    pub ssim: f64,
    /// FD-proxy.
    pub feature_distance: f64,
    pub samples: usize,
}

impl MetricsReport {
    /// Mean PSNR and SSIM over image pairs plus the set-level FD-proxy.
    pub fn measure(
        condition: Condition,
        subject: impl Into<String>,
        reference: impl Into<String>,
        outputs: &[ImageF32],
        targets: &[ImageF32],
        extractor: &FeatureExtractor,
    ) -> Result<Self> {
        if outputs.len() != targets.len() {
            return Err(Error::config(format!("{} outputs for {} targets", outputs.len(), targets.len())));
        }
        if outputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = outputs.len() as f64;
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (o, t) in outputs.iter().zip(targets) {
            psnr_sum += psnr(o, t)?;
            ssim_sum += ssim(o, t)?;
        }
        Ok(MetricsReport {
            condition,
            subject: subject.into(),
            reference: reference.into(),
            psnr: psnr_sum / n,
            ssim: ssim_sum / n,
            feature_distance: feature_distance(extractor, outputs, targets)?,
            samples: outputs.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "condition,subject,reference,psnr_db,ssim,fd_proxy,samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.6},{}",
            self.condition.as_str(),
            self.subject,
            self.reference,
            self.psnr,
            self.ssim,
            self.feature_distance,
            self.samples
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(v: f32) -> ImageF32 {
        ImageF32::filled(16, 16, 3, v)
    }

    #[test]
    fn psnr_identical_is_capped() {
        assert_eq!(psnr(&flat(0.3), &flat(0.3)).unwrap(), 99.0);
    }

    #[test]
    fn psnr_uniform_8bit_offset() {
        let p = psnr(&flat(0.0), &flat(100.0 / 255.0)).unwrap();
        assert!((p - 20.0 * (255.0f64 / 100.0).log10()).abs() < 1e-5, "{p}");
        assert!((p - 8.1308).abs() < 1e-4);
    }

    #[test]
    fn psnr_symmetric_and_shape_checked() {
        let imgs = generate_dataset(&DatasetSpec { count: 2, ..Default::default() }).unwrap();
        assert_eq!(psnr(&imgs[0], &imgs[1]).unwrap(), psnr(&imgs[1], &imgs[0]).unwrap());
        assert!(psnr(&flat(0.0), &ImageF32::filled(8, 8, 3, 0.0)).is_err());
    }

    #[test]
    fn ssim_two_constants_closed_form() {
        let (a, b) = (0.2f64, 0.7f64);
        let expect = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        let s = ssim(&ImageF32::filled(16, 16, 1, a as f32), &ImageF32::filled(16, 16, 1, b as f32)).unwrap();
        assert!((s - expect).abs() < 1e-6, "{s} vs {expect}");
    }

    #[test]
    fn ssim_too_small_rejected() {
        assert!(ssim(&ImageF32::filled(10, 16, 3, 0.0), &ImageF32::filled(10, 16, 3, 0.0)).is_err());
    }

    #[test]
    fn bit_accuracy_cases() {
        let a = vec![true; 128];
        assert_eq!(bit_accuracy(&a, &a).unwrap(), 1.0);
        let mut b = a.clone();
        b.iter_mut().take(32).for_each(|v| *v = false);
        assert_eq!(bit_accuracy(&a, &b).unwrap(), 0.75);
        assert!(bit_accuracy(&a, &b[..64]).is_err());
    }

    #[test]
    fn bit_accuracy_of_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean: f64 = (0..1000)
            .map(|_| {
                let a: Vec<bool> = (0..128).map(|_| rng.random()).collect();
                let b: Vec<bool> = (0..128).map(|_| rng.random()).collect();
                bit_accuracy(&a, &b).unwrap()
            })
            .sum::<f64>()
            / 1000.0;
        assert!((mean - 0.5).abs() < 0.1, "{mean}");
    }

    #[test]
    fn frechet_of_identical_sets_is_zero() {
        let imgs = generate_dataset(&DatasetSpec { count: 12, ..Default::default() }).unwrap();
        let f = FeatureExtractor::default();
        assert!(feature_distance(&f, &imgs, &imgs).unwrap() < 1e-6);
    }

    #[test]
    fn frechet_of_shifted_gaussians() {
        // Equal covariances: distance reduces to the squared mean offset.
        let a: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, (i * i) as f64 * 0.5]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|r| vec![r[0] + 3.0, r[1] - 1.0]).collect();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 10.0).abs() < 1e-6, "{d}");
    }
}
