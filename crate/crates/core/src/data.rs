//! Procedural image corpus: linear/radial colour ramps, soft-edged
//! geometric shapes and band-limited sinusoidal textures.

use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyMix {
    pub gradients: f64,
    pub shapes: f64,
    pub noise: f64,
}

impl Default for FamilyMix {
    fn default() -> Self {
        FamilyMix { gradients: 1.0 / 3.0, shapes: 1.0 / 3.0, noise: 1.0 / 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mix: FamilyMix,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { seed: 7, count: 500, height: 32, width: 32, channels: 3, mix: FamilyMix::default() }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::EmptyDataset);
        }
        let m = self.mix;
        if [m.gradients, m.shapes, m.noise].iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("family proportions must lie in [0, 1]"));
        }
        if ((m.gradients + m.shapes + m.noise) - 1.0).abs() > 1e-6 {
            return Err(Error::config("family proportions must sum to 1"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("images must be at least 8x8"));
        }
        if self.channels != 3 && self.channels != 1 {
            return Err(Error::config("only 1 or 3 channels are supported"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Gradient,
    Shapes,
    Noise,
}

/// Deterministically renders `spec.count` images.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<ImageF32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let u: f64 = rng.random();
        let family = if u < spec.mix.gradients {
            Family::Gradient
        } else if u < spec.mix.gradients + spec.mix.shapes {
            Family::Shapes
        } else {
            Family::Noise
        };
        let img = match family {
            Family::Gradient => gradient(&mut rng, spec),
            Family::Shapes => shapes(&mut rng, spec),
            Family::Noise => texture(&mut rng, spec),
        };
        images.push(img.clamped());
    }
    Ok(images)
}

fn color(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f32> {
    (0..channels).map(|_| rng.random::<f32>()).collect()
}

fn gradient(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> ImageF32 {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let from = color(rng, c);
    let to = color(rng, c);
    let radial = rng.random_bool(0.3);
    let angle = rng.random_range(0.0..2.0 * PI);
    let (cx, cy) = (rng.random_range(0.0..w as f32), rng.random_range(0.0..h as f32));
    let span = (h.max(w)) as f32;
    let mut img = ImageF32::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let t = if radial {
                (dx * dx + dy * dy).sqrt() / span
            } else {
                0.5 + (dx * angle.cos() + dy * angle.sin()) / (1.5 * span)
            };
            let t = t.clamp(0.0, 1.0);
            for ch in 0..c {
                img.set(y, x, ch, from[ch] + (to[ch] - from[ch]) * t);
            }
        }
    }
    img
}

fn shapes(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> ImageF32 {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let bg = color(rng, c);
    let mut img = ImageF32::filled(h, w, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                img.set(y, x, ch, bg[ch]);
            }
        }
    }
    let count = rng.random_range(1..=3);
    let scale = h.min(w) as f32;
    for _ in 0..count {
        let fill = color(rng, c);
        let (cx, cy) = (rng.random_range(0.2..0.8) * w as f32, rng.random_range(0.2..0.8) * h as f32);
        let circle = rng.random_bool(0.5);
        let (rx, ry) = (rng.random_range(0.12..0.35) * scale, rng.random_range(0.12..0.35) * scale);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                // signed distance, negative inside
                let d = if circle {
                    (px * px + py * py).sqrt() - rx
                } else {
                    (px.abs() - rx).max(py.abs() - ry)
                };
                let cover = (0.5 - d / 1.5).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for ch in 0..c {
                        let v = img.get(y, x, ch);
                        img.set(y, x, ch, v + (fill[ch] - v) * cover);
                    }
                }
            }
        }
    }
    img
}

fn texture(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> ImageF32 {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let base = color(rng, c);
    let mut img = ImageF32::filled(h, w, c, 0.0);
    for ch in 0..c {
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(-3.0f32..3.0),
                    rng.random_range(-3.0f32..3.0),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.04f32..0.12),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
                let s: f32 = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * u + fy * v) + ph).sin())
                    .sum();
                img.set(y, x, ch, base[ch] + s);
            }
        }
    }
    img
}

/// Deterministic shuffled partition into `(train, eval)`.
pub fn split(dataset: &[ImageF32], train_fraction: f32, seed: u64) -> Result<(Vec<ImageF32>, Vec<ImageF32>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (dataset.len() as f64 * train_fraction as f64).round() as usize;
    let (a, b) = idx.split_at(n_train);
    Ok((a.iter().map(|&i| dataset[i].clone()).collect(), b.iter().map(|&i| dataset[i].clone()).collect()))
}
