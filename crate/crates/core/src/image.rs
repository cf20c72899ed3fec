use keygate_tensor::Tensor;

use crate::error::{Error, Result};

/// Interleaved `H×W×C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::config(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(ImageF32 { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        ImageF32 { height, width, channels, data: vec![value; height * width * channels] }
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Rec. 601 luma plane (single channel images are returned as-is).
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as f64).collect();
        }
        self.data
            .chunks(self.channels)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn mean_luminance(&self) -> f64 {
        let l = self.luminance();
        l.iter().sum::<f64>() / l.len() as f64
    }

    /// One channel as a dense `H×W` plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f32>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0; height * width * channels];
        for (c, p) in planes.iter().enumerate() {
            if p.len() != height * width {
                return Err(Error::config("plane size mismatch"));
            }
            for (i, &v) in p.iter().enumerate() {
                data[i * channels + c] = v;
            }
        }
        Ok(ImageF32 { height, width, channels, data })
    }

    pub fn same_dims(&self, other: &ImageF32) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::config(format!(
                "image shape mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

/// Packs images into an `N×C×H×W` tensor.
pub fn to_batch(images: &[ImageF32]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        first.same_dims(img)?;
        for ch in 0..c {
            data.extend(img.data.iter().skip(ch).step_by(c));
        }
    }
    Ok(Tensor::new(vec![images.len(), c, h, w], data)?)
}

/// Unpacks an `N×C×H×W` tensor into images.
pub fn from_batch(batch: &Tensor<f32>) -> Result<Vec<ImageF32>> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::config(format!("expected NCHW batch, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            let src = &batch.data()[i * c * plane..(i + 1) * c * plane];
            let mut data = vec![0.0; c * plane];
            for ch in 0..c {
                for p in 0..plane {
                    data[p * c + ch] = src[ch * plane + p];
                }
            }
            ImageF32 { height: h, width: w, channels: c, data }
        })
        .collect())
}
