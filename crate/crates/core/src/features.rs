//! Fixed random convolutional features used by the perceptual loss and the
//! set-level feature distance.

use keygate_tensor::{Bindings, ConvParams, Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{to_batch, ImageF32};

pub const DEFAULT_FEATURE_SEED: u64 = 1234;

/// `(out, in, stride)` of each layer; all kernels are 3×3 with padding 1.
const LAYERS: [(usize, usize, usize); 3] = [(6, 3, 1), (8, 6, 2), (8, 8, 2)];

/// Untrained 3-layer conv stack with seed-determined weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    seed: u64,
    params: ParamStore<f32>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (l, &(o, i, _)) in LAYERS.iter().enumerate() {
            let normal = Normal::new(0.0, (2.0 / (i * 9) as f64).sqrt()).expect("finite std");
            params.insert(format!("feat.{l}.w"), Tensor::from_fn(&[o, i, 3, 3], |_| normal.sample(&mut rng) as f32), true);
            params.insert(format!("feat.{l}.b"), Tensor::zeros(&[o]), true);
        }
        FeatureExtractor { seed, params }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// Embedding width of [`Self::embed`].
    pub fn embedding_dim(&self) -> usize {
        LAYERS.iter().map(|l| 2 * l.0).sum()
    }

    /// Feature map after each layer.
    pub fn layers<T: Scalar>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(LAYERS.len());
        let mut h = x;
        for (l, &(_, _, stride)) in LAYERS.iter().enumerate() {
            let w = b.var(&format!("feat.{l}.w"))?;
            let bias = b.var(&format!("feat.{l}.b"))?;
            let y = g.conv2d(h, w, Some(bias), ConvParams::new(stride, 1))?;
            h = g.relu(y);
            out.push(h);
        }
        Ok(out)
    }

    /// Mean over layers of the feature-map MSE between two NCHW batches.
    pub fn distance_node<T: Scalar>(&self, g: &mut Graph<T>, b: &Bindings, x: Var, y: Var) -> Result<Var> {
        let fx = self.layers(g, b, x)?;
        let fy = self.layers(g, b, y)?;
        let mut total: Option<Var> = None;
        for (a, c) in fx.into_iter().zip(fy) {
            let d = g.mse(a, c)?;
            total = Some(match total {
                Some(t) => g.add(t, d)?,
                None => d,
            });
        }
        let total = total.expect("extractor has layers");
        Ok(g.scale(total, T::of_f64(1.0 / LAYERS.len() as f64)))
    }

    /// Perceptual distance between two equally sized image sets.
    pub fn distance(&self, a: &[ImageF32], b: &[ImageF32]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::config(format!("image counts differ: {} vs {}", a.len(), b.len())));
        }
        for (x, y) in a.iter().zip(b) {
            x.same_dims(y)?;
        }
        let (ta, tb) = (to_batch(a)?, to_batch(b)?);
        let mut g = Graph::<f32>::new();
        let binds = self.params.bind(&mut g, false);
        let (x, y) = (g.constant(ta), g.constant(tb));
        let d = self.distance_node(&mut g, &binds, x, y)?;
        Ok(g.value(d).item() as f64)
    }

    /// Per-channel mean and standard deviation of every layer, one row per image.
    pub fn embed(&self, images: &[ImageF32]) -> Result<Vec<Vec<f64>>> {
        let batch = to_batch(images)?;
        let mut g = Graph::<f32>::new();
        let binds = self.params.bind(&mut g, false);
        let x = g.constant(batch);
        let layers = self.layers(&mut g, &binds, x)?;
        let mut rows = vec![Vec::with_capacity(self.embedding_dim()); images.len()];
        for v in layers {
            let t = g.value(v);
            let (c, plane) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
            for (i, row) in rows.iter_mut().enumerate() {
                for ch in 0..c {
                    let s = &t.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    let mean = s.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                    let var = s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
                    row.push(mean);
                    row.push(var.sqrt());
                }
            }
        }
        Ok(rows)
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::new(DEFAULT_FEATURE_SEED)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};

    fn noised(img: &ImageF32, sigma: f32, rng: &mut ChaCha8Rng) -> ImageF32 {
        let normal = Normal::new(0.0f32, sigma).unwrap();
        let data = img.data().iter().map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0)).collect();
        ImageF32::new(img.height(), img.width(), img.channels(), data).unwrap()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let imgs = generate_dataset(&DatasetSpec { count: 4, ..Default::default() }).unwrap();
        assert_eq!(FeatureExtractor::default().distance(&imgs, &imgs).unwrap(), 0.0);
    }

    #[test]
    fn distance_is_symmetric() {
        let a = generate_dataset(&DatasetSpec { count: 3, seed: 1, ..Default::default() }).unwrap();
        let b = generate_dataset(&DatasetSpec { count: 3, seed: 2, ..Default::default() }).unwrap();
        let f = FeatureExtractor::default();
        assert_eq!(f.distance(&a, &b).unwrap(), f.distance(&b, &a).unwrap());
    }

    #[test]
    fn heavier_noise_is_farther() {
        let f = FeatureExtractor::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for img in generate_dataset(&DatasetSpec { count: 20, seed: 11, ..Default::default() }).unwrap() {
            let light = noised(&img, 0.02, &mut rng);
            let heavy = noised(&img, 0.2, &mut rng);
            let (dl, dh) = (f.distance(&[img.clone()], &[light]).unwrap(), f.distance(&[img.clone()], &[heavy]).unwrap());
            assert!(dh > dl, "{dh} <= {dl}");
        }
    }

    #[test]
    fn embedding_width() {
        let imgs = generate_dataset(&DatasetSpec { count: 2, ..Default::default() }).unwrap();
        let f = FeatureExtractor::new(9);
        let rows = f.embed(&imgs).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.len() == f.embedding_dim()));
    }

    #[test]
    fn mismatched_sets_rejected() {
        let imgs = generate_dataset(&DatasetSpec { count: 2, ..Default::default() }).unwrap();
        assert!(FeatureExtractor::default().distance(&imgs, &imgs[..1]).is_err());
    }
}
