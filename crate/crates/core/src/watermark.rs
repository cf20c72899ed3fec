//! Sign-replication latent watermark: each payload bit fixes the sign of
//! `r` secretly chosen latent elements whose magnitudes are half-normal, so
//! a watermarked latent is still a standard normal draw.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_attack, AttackSpec};
use crate::error::{Error, Result};
use crate::image::{from_batch, to_batch, ImageF32};
use crate::metrics::bit_accuracy;
use crate::model::{ReferenceAutoencoder, LATENT_CHANNELS};
use keygate_tensor::Tensor;

/// Latent grid of a 32×32 image.
pub const LATENT_SHAPE: [usize; 3] = [LATENT_CHANNELS, 8, 8];
pub const LATENT_ELEMENTS: usize = LATENT_SHAPE[0] * LATENT_SHAPE[1] * LATENT_SHAPE[2];
pub const DEFAULT_BITS: usize = 32;
pub const DEFAULT_REPLICATION: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkPayload {
    bits: Vec<bool>,
    replication: usize,
    /// Seeds the secret position assignment.
    seed: u64,
}

impl WatermarkPayload {
    pub fn new(bits: Vec<bool>, replication: usize, seed: u64) -> Result<Self> {
        check_capacity(bits.len(), replication)?;
        Ok(WatermarkPayload { bits, replication, seed })
    }

    /// Uniformly random `k`-bit payload.
    pub fn random(k: usize, replication: usize, seed: u64, bits_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(bits_seed);
        WatermarkPayload::new((0..k).map(|_| rng.random()).collect(), replication, seed)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn replication(&self) -> usize {
        self.replication
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn check_capacity(k: usize, r: usize) -> Result<()> {
    if k == 0 || r == 0 {
        return Err(Error::Capacity("payload length and replication must be positive".into()));
    }
    match k.checked_mul(r) {
        Some(n) if n <= LATENT_ELEMENTS => Ok(()),
        _ => Err(Error::Capacity(format!("{k} bits x {r} copies exceed {LATENT_ELEMENTS} latent elements"))),
    }
}

/// Latent positions carrying bit `i` are `slots[i*r..(i+1)*r]`.
fn slots(seed: u64, k: usize, r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..LATENT_ELEMENTS).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(k * r);
    order
}

/// One watermarked latent of shape `[4, 8, 8]`; `sample_seed` draws the magnitudes.
pub fn embed(payload: &WatermarkPayload, sample_seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut data: Vec<f32> = (0..LATENT_ELEMENTS).map(|_| StandardNormal.sample(&mut rng)).collect();
    let r = payload.replication;
    for (i, &pos) in slots(payload.seed, payload.bits.len(), r).iter().enumerate() {
        let magnitude = data[pos].abs();
        data[pos] = if payload.bits[i / r] { magnitude } else { -magnitude };
    }
    Tensor::new(LATENT_SHAPE.to_vec(), data).expect("fixed shape")
}

/// Majority vote over the signs of each bit's positions; ties follow the sign of their sum.
pub fn extract_from_latent(latent: &[f32], seed: u64, k: usize, r: usize) -> Result<Vec<bool>> {
    check_capacity(k, r)?;
    if latent.len() != LATENT_ELEMENTS {
        return Err(Error::Decode(format!("expected {LATENT_ELEMENTS} latent elements, got {}", latent.len())));
    }
    let pos = slots(seed, k, r);
    Ok(pos
        .chunks(r)
        .map(|group| {
            let votes: isize = group.iter().map(|&p| if latent[p] > 0.0 { 1 } else { -1 }).sum();
            if votes == 0 {
                group.iter().map(|&p| latent[p] as f64).sum::<f64>() > 0.0
            } else {
                votes > 0
            }
        })
        .collect())
}

/// Subtracts each channel's median. Embedded latents have zero median per
/// channel, while global edits such as brightness shift whole channels.
fn recentred(latent: &[f32]) -> Vec<f32> {
    let plane = LATENT_SHAPE[1] * LATENT_SHAPE[2];
    let mut out = Vec::with_capacity(latent.len());
    for ch in latent.chunks(plane) {
        let mut sorted = ch.to_vec();
        sorted.sort_by(f32::total_cmp);
        let median = 0.5 * (sorted[plane / 2 - 1] + sorted[plane / 2]);
        out.extend(ch.iter().map(|v| v - median));
    }
    out
}

/// Re-encodes each image with the reference encoder and extracts `k` bits.
pub fn extract_batch(images: &[ImageF32], encoder: &ReferenceAutoencoder, seed: u64, k: usize, r: usize) -> Result<Vec<Vec<bool>>> {
    let z = encoder.encode(&to_batch(images)?)?;
    let per: usize = z.shape()[1..].iter().product();
    if per != LATENT_ELEMENTS {
        return Err(Error::Decode(format!("image encodes to {:?}, expected {LATENT_SHAPE:?}", &z.shape()[1..])));
    }
    z.data().chunks(per).map(|l| extract_from_latent(&recentred(l), seed, k, r)).collect()
}

pub fn extract(image: &ImageF32, encoder: &ReferenceAutoencoder, seed: u64, k: usize, r: usize) -> Result<Vec<bool>> {
    Ok(extract_batch(std::slice::from_ref(image), encoder, seed, k, r)?.remove(0))
}

/// Mean bit accuracy per attack for one decode path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub method: String,
    /// `(attack label, accuracy)` with `"clean"` first.
    pub cells: Vec<(String, f64)>,
}

impl RobustnessRow {
    pub fn clean(&self) -> f64 {
        self.cells[0].1
    }

    pub fn get(&self, attack: &str) -> Option<f64> {
        self.cells.iter().find(|(a, _)| a == attack).map(|c| c.1)
    }

    pub fn csv_header(&self) -> String {
        std::iter::once("method").chain(self.cells.iter().map(|c| c.0.as_str())).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        std::iter::once(self.method.clone()).chain(self.cells.iter().map(|c| format!("{:.4}", c.1))).collect::<Vec<_>>().join(",")
    }
}

/// Watermarked latents for `payloads`, decoded by `decode`, optionally
/// attacked, then read back through `encoder`.
pub fn robustness_eval(
    method: &str,
    payloads: &[WatermarkPayload],
    sample_seed: u64,
    decode: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
    encoder: &ReferenceAutoencoder,
    suite: &[AttackSpec],
) -> Result<RobustnessRow> {
    if payloads.is_empty() {
        return Err(Error::config("robustness evaluation needs at least one payload"));
    }
    let latents: Vec<Tensor<f32>> =
        payloads.iter().enumerate().map(|(i, p)| embed(p, sample_seed.wrapping_add(i as u64))).collect();
    let images = from_batch(&decode(&Tensor::stack(&latents)?)?)?;
    let accuracy = |imgs: &[ImageF32]| -> Result<f64> {
        let mut total = 0.0;
        for (img, p) in imgs.iter().zip(payloads) {
            let got = extract(img, encoder, p.seed, p.bits.len(), p.replication)?;
            total += bit_accuracy(&p.bits, &got)?;
        }
        Ok(total / payloads.len() as f64)
    };
    let mut cells = vec![("clean".to_string(), accuracy(&images)?)];
    for spec in suite {
        let attacked = images
            .iter()
            .enumerate()
            .map(|(i, img)| apply_attack(img, &AttackSpec { seed: spec.seed.wrapping_add(i as u64), ..*spec }))
            .collect::<Result<Vec<_>>>()?;
        cells.push((spec.label(), accuracy(&attacked)?));
    }
    Ok(RobustnessRow { method: method.to_string(), cells })
}
