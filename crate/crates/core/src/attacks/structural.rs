//! Attacks on the gated decoder itself: wrong keys, fuser removal, partial
//! layer removal and the exhaustive structure search.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::filters::restoration_attack;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::image::{from_batch, ImageF32};
use crate::keying::{combination_count, crack_time, enumerate_removals, random_wrong_key, FuserKey, RemovalHypothesis};
use crate::metrics::{psnr, ssim, Condition, MetricsReport};
use crate::model::GatedDecoder;
use keygate_tensor::Tensor;

const REFERENCE: &str = "reference decode";

/// Reference decodes of `latents`, the target of every attack report.
pub fn reference_images(decoder: &GatedDecoder, latents: &Tensor<f32>) -> Result<Vec<ImageF32>> {
    from_batch(&decoder.decode_reference(latents)?)
}

/// Registered-key decode measured against the reference.
pub fn authorized_report(
    decoder: &GatedDecoder,
    latents: &Tensor<f32>,
    key: &FuserKey,
    extractor: &FeatureExtractor,
) -> Result<MetricsReport> {
    let out = from_batch(&decoder.decode(latents, Some(key))?.images)?;
    MetricsReport::measure(Condition::Ori, "registered key", REFERENCE, &out, &reference_images(decoder, latents)?, extractor)
}

/// `trials` distinct keys, none equal to `correct`.
pub fn sample_wrong_keys(correct: &FuserKey, trials: usize, seed: u64) -> Vec<FuserKey> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<FuserKey> = Vec::with_capacity(trials);
    while keys.len() < trials {
        let k = random_wrong_key(correct, &mut rng);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys
}

/// Decodes with random wrong keys; metrics are averaged over trials.
pub fn wrong_key_attack(
    decoder: &GatedDecoder,
    latents: &Tensor<f32>,
    correct_key: &FuserKey,
    trials: usize,
    seed: u64,
    extractor: &FeatureExtractor,
) -> Result<MetricsReport> {
    if trials == 0 {
        return Err(Error::config("wrong-key attack needs at least one trial"));
    }
    let targets = reference_images(decoder, latents)?;
    let mut reports = Vec::with_capacity(trials);
    for key in sample_wrong_keys(correct_key, trials, seed) {
        let out = from_batch(&decoder.decode(latents, Some(&key))?.images)?;
        reports.push(MetricsReport::measure(Condition::WrongKey, "random wrong key", REFERENCE, &out, &targets, extractor)?);
    }
    let n = trials as f64;
    Ok(MetricsReport {
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        feature_distance: reports.iter().map(|r| r.feature_distance).sum::<f64>() / n,
        samples: reports.iter().map(|r| r.samples).sum(),
        ..reports.swap_remove(0)
    })
}

/// Strips every fuser layer and decodes without a key.
pub fn remove_fuser_attack(decoder: &GatedDecoder, latents: &Tensor<f32>, extractor: &FeatureExtractor) -> Result<MetricsReport> {
    let out = from_batch(&decoder.without_fusers().decode(latents, None)?.images)?;
    MetricsReport::measure(Condition::NoFuser, "fusers removed", REFERENCE, &out, &reference_images(decoder, latents)?, extractor)
}

/// Decodes under a removal hypothesis. The attacker has no key, so fusers are bypassed.
pub fn partial_removal_attack(
    decoder: &GatedDecoder,
    hypothesis: &RemovalHypothesis,
    latents: &Tensor<f32>,
    extractor: &FeatureExtractor,
) -> Result<MetricsReport> {
    let out = from_batch(&decoder.decode_with(latents, None, hypothesis)?.images)?;
    let subject = format!("removal {hypothesis}");
    MetricsReport::measure(Condition::Removal, subject, REFERENCE, &out, &reference_images(decoder, latents)?, extractor)
}

/// Restores degraded outputs with the filter stand-in and measures them.
pub fn restoration_report(
    source: Condition,
    degraded: &[ImageF32],
    targets: &[ImageF32],
    extractor: &FeatureExtractor,
) -> Result<MetricsReport> {
    let restored: Vec<ImageF32> = degraded.iter().map(restoration_attack).collect();
    MetricsReport::measure(Condition::Restored, format!("restored {}", source.as_str()), REFERENCE, &restored, targets, extractor)
}

/// One evaluated hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    /// Position of the hypothesis in [`enumerate_removals`] order.
    pub index: usize,
    pub hypothesis: RemovalHypothesis,
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub combination_count: u64,
    pub trials: Vec<SearchTrial>,
    pub best: SearchTrial,
    /// Mean trial time from a timing pass run before the search.
    pub t_test: f64,
    /// `crack_time` evaluated at `t_test`.
    pub predicted_s: f64,
    /// Wall time of the whole search.
    pub measured_s: f64,
}

impl SearchOutcome {
    pub fn mean_trial_s(&self) -> f64 {
        self.trials.iter().map(|t| t.seconds).sum::<f64>() / self.trials.len() as f64
    }

    /// Measured search time over the prediction.
    pub fn timing_ratio(&self) -> f64 {
        self.measured_s / self.predicted_s
    }

    /// Trace as JSON lines in visit order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }
}

const WARMUP_TRIALS: usize = 3;

/// Evaluates `budget` removal hypotheses drawn without replacement on the
/// fuser-stripped decoder and keeps the one closest to the reference.
pub fn brute_force_search(
    decoder: &GatedDecoder,
    latents: &Tensor<f32>,
    budget: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    let s = decoder.structure();
    let count = combination_count(s.m, s.n)?;
    if budget == 0 || budget as u64 > count {
        return Err(Error::config(format!("budget must be in 1..={count}, got {budget}")));
    }
    let stripped = decoder.without_fusers();
    let targets = reference_images(decoder, latents)?;
    let mut order: Vec<(usize, RemovalHypothesis)> = enumerate_removals(s.m, s.n)?.into_iter().enumerate().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(budget);

    let evaluate = |h: &RemovalHypothesis| -> Result<(f64, f64)> {
        let out = from_batch(&stripped.decode_with(latents, None, h)?.images)?;
        let n = out.len() as f64;
        let mut p = 0.0;
        let mut q = 0.0;
        for (o, t) in out.iter().zip(&targets) {
            p += psnr(o, t)?;
            q += ssim(o, t)?;
        }
        Ok((p / n, q / n))
    };

    // t_test comes from a separate timing pass over the first few hypotheses
    // so that the search itself can check the prediction.
    let probe = &order[..order.len().min(WARMUP_TRIALS)];
    let t0 = Instant::now();
    for (_, h) in probe {
        evaluate(h)?;
    }
    let t_test = t0.elapsed().as_secs_f64() / probe.len() as f64;

    let started = Instant::now();
    let mut trials = Vec::with_capacity(budget);
    for (index, hypothesis) in order {
        let t0 = Instant::now();
        let (psnr, ssim) = evaluate(&hypothesis)?;
        trials.push(SearchTrial { index, hypothesis, psnr, ssim, seconds: t0.elapsed().as_secs_f64() });
    }
    let measured_s = started.elapsed().as_secs_f64();
    let best = trials
        .iter()
        .max_by(|a, b| a.psnr.total_cmp(&b.psnr).then(b.index.cmp(&a.index)))
        .expect("budget is positive")
        .clone();
    let predicted_s = crack_time(s.m, s.n, t_test)?.t_crack * budget as f64 / count as f64;
    Ok(SearchOutcome { combination_count: count, trials, best, t_test, predicted_s, measured_s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keying::generate_key;
    use crate::model::{ArchConfig, ReferenceAutoencoder, StructureConfig};
    use crate::training::normal_latents;
    use std::collections::HashSet;

    fn decoder(m: i64, n: i64) -> GatedDecoder {
        let mut r = ReferenceAutoencoder::build(ArchConfig::default(), 2).unwrap();
        r.freeze();
        GatedDecoder::build(&r, StructureConfig::new(m, n).unwrap(), 3).unwrap()
    }

    #[test]
    fn wrong_keys_differ_from_correct_and_each_other() {
        let k = generate_key(1);
        let keys = sample_wrong_keys(&k, 20, 4);
        assert!(keys.iter().all(|w| *w != k));
        assert_eq!(keys.iter().collect::<HashSet<_>>().len(), 20);
        assert_eq!(keys, sample_wrong_keys(&k, 20, 4));
    }

    #[test]
    fn untrained_fuser_removal_is_lossless() {
        // Fresh fine-tuning layers start near identity; with m = n = 0 only
        // the fusers were added, and bypassing them reproduces the reference.
        let d = decoder(0, 0);
        let z = normal_latents(3, 32, 32, 1);
        let r = remove_fuser_attack(&d, &z, &FeatureExtractor::default()).unwrap();
        assert_eq!(r.condition.as_str(), "no_fuser");
        assert_eq!(r.psnr, 99.0);
    }

    #[test]
    fn keep_all_equals_unmodified_bypass_decode() {
        let d = decoder(2, 1);
        let z = normal_latents(2, 32, 32, 5);
        let a = d.decode_with(&z, None, &RemovalHypothesis::KEEP_ALL).unwrap().images;
        assert!(a.bit_eq(&d.decode(&z, None).unwrap().images));
        let f = FeatureExtractor::default();
        let r = partial_removal_attack(&d, &RemovalHypothesis::KEEP_ALL, &z, &f).unwrap();
        let out = from_batch(&a).unwrap();
        let direct = MetricsReport::measure(Condition::Removal, "x", "y", &out, &reference_images(&d, &z).unwrap(), &f).unwrap();
        assert_eq!(r.psnr, direct.psnr);
    }

    #[test]
    fn invalid_hypothesis_rejected() {
        let d = decoder(1, 0);
        let z = normal_latents(1, 32, 32, 5);
        let bad = RemovalHypothesis::mids(0, 7);
        assert!(matches!(partial_removal_attack(&d, &bad, &z, &FeatureExtractor::default()), Err(Error::Config(_))));
    }

    #[test]
    fn exhaustive_search_visits_each_hypothesis_once() {
        let d = decoder(1, 0);
        let z = normal_latents(2, 32, 32, 6);
        let out = brute_force_search(&d, &z, 4, 0).unwrap();
        assert_eq!(out.combination_count, 4);
        let mut idx: Vec<usize> = out.trials.iter().map(|t| t.index).collect();
        idx.sort();
        assert_eq!(idx, [0, 1, 2, 3]);
        assert!(brute_force_search(&d, &z, 5, 0).is_err());
        assert_eq!(out.to_jsonl().unwrap().lines().count(), 4);
    }

    #[test]
    fn search_order_is_seeded() {
        let d = decoder(2, 1);
        let z = normal_latents(1, 32, 32, 6);
        let order = |seed| brute_force_search(&d, &z, 5, seed).unwrap().trials.iter().map(|t| t.index).collect::<Vec<_>>();
        assert_eq!(order(3), order(3));
    }
}
