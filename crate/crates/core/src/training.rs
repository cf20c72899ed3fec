//! Stage-0 reference training and Stage-1 gated-decoder training.

use std::collections::BTreeMap;
use std::time::Instant;

use keygate_tensor::{AdamWConfig, Graph, OptimizerState, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, DEFAULT_FEATURE_SEED};
use crate::image::{from_batch, to_batch, ImageF32};
use crate::keying::{random_wrong_key, FuserKey};
use crate::metrics::{psnr, ssim};
use crate::model::{key_tensor, run_blocks, ArchConfig, GatedDecoder, ReferenceAutoencoder, StructureConfig, LATENT_CHANNELS};

/// Stage-0 hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceHParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    /// Weight of `(mean z)^2 + (mean z^2 - 1)^2` on encoder latents.
    pub latent_weight: f64,
    /// Weight of `mse(E(D(e)), e)` on standard normal latents.
    pub cycle_weight: f64,
    /// Normal latents per step for the cycle term.
    pub cycle_batch: usize,
    pub seed: u64,
}

impl Default for ReferenceHParams {
    fn default() -> Self {
        ReferenceHParams {
            learning_rate: 2e-3,
            weight_decay: 0.0,
            steps: 3000,
            batch_size: 16,
            clip_norm: Some(1.0),
            latent_weight: 0.01,
            cycle_weight: 0.1,
            cycle_batch: 8,
            seed: 0,
        }
    }
}

/// Stage-1 hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// MAE weight.
    pub lambda1: f64,
    /// Perceptual weight.
    pub lambda2: f64,
    /// Wrong-key repulsion weight; zero reproduces the plain objective.
    pub lambda3: f64,
    pub margin: f64,
    /// Upper edge of the wrong-key MAE band; beyond it repulsion pulls back.
    pub margin_max: Option<f64>,
    pub wrong_keys_per_step: usize,
    /// Fuser-bypass repulsion weight, zero by default.
    pub lambda_bypass: f64,
    /// Bypass hinge target: the batch's wrong-key MAE plus this gap, or the
    /// gap alone when no wrong keys are sampled.
    pub bypass_gap: f64,
    pub clip_norm: Option<f64>,
    /// Fraction of each batch drawn from standard normal latents instead of encoded images.
    pub normal_fraction: f64,
    pub feature_seed: u64,
    pub seed: u64,
}

impl Default for TrainHParams {
    fn default() -> Self {
        TrainHParams {
            learning_rate: 5e-5,
            weight_decay: 0.01,
            steps: 1000,
            batch_size: 8,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.0,
            margin: 0.05,
            margin_max: None,
            wrong_keys_per_step: 1,
            lambda_bypass: 0.0,
            bypass_gap: 0.05,
            clip_norm: Some(1.0),
            normal_fraction: 0.5,
            feature_seed: DEFAULT_FEATURE_SEED,
            seed: 0,
        }
    }
}

impl TrainHParams {
    pub fn validate(&self) -> Result<()> {
        check_common(self.learning_rate, self.batch_size)?;
        if [self.lambda1, self.lambda2, self.lambda3, self.lambda_bypass].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.normal_fraction) {
            return Err(Error::config("normal_fraction must lie in [0, 1]"));
        }
        if self.margin_max.is_some_and(|m| !(m > self.margin)) {
            return Err(Error::config("margin_max must exceed margin"));
        }
        if self.lambda3 > 0.0 && self.wrong_keys_per_step == 0 {
            return Err(Error::config("repulsion needs at least one wrong key per step"));
        }
        Ok(())
    }
}

fn check_common(lr: f64, batch: usize) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
    /// Names both operands of the evaluation metrics.
    pub eval_subject: String,
    pub eval_reference: String,
    pub eval_psnr: f64,
    pub eval_ssim: f64,
    pub eval_samples: usize,
    pub hparams: serde_json::Value,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<StepRecord>,
    pub summary: TrainSummary,
}

impl TrainReport {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.curve {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        let strip = |r: &TrainReport| TrainSummary { wall_time_s: 0.0, ..r.summary.clone() };
        self.curve == other.curve && strip(self) == strip(other)
    }
}

fn optimizer(lr: f64, wd: f64, clip: Option<f64>) -> OptimizerState<f32> {
    OptimizerState::new(AdamWConfig { learning_rate: lr, weight_decay: wd, clip_norm: clip, ..Default::default() })
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn sample_batch(images: &[ImageF32], n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let picks: Vec<ImageF32> = (0..n).map(|_| images[rng.random_range(0..images.len())].clone()).collect();
    to_batch(&picks)
}

fn value(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

fn step_error(step: usize, e: impl std::fmt::Display) -> Error {
    Error::Training { step, detail: e.to_string() }
}

/// Adds `w * term` to an optional running total.
fn accumulate(g: &mut Graph<f32>, total: Option<Var>, term: Var, w: f64) -> Result<Option<Var>> {
    let scaled = g.scale(term, w as f32);
    Ok(Some(match total {
        Some(t) => g.add(t, scaled)?,
        None => scaled,
    }))
}

/// Mean reconstruction PSNR and SSIM of `images` through the reference autoencoder.
pub fn reconstruction_quality(ae: &ReferenceAutoencoder, images: &[ImageF32]) -> Result<(f64, f64)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for chunk in images.chunks(64) {
        let out = from_batch(&ae.reconstruct(&to_batch(chunk)?)?)?;
        for (o, t) in out.iter().zip(chunk) {
            psnr_sum += psnr(o, t)?;
            ssim_sum += ssim(o, t)?;
        }
    }
    Ok((psnr_sum / images.len() as f64, ssim_sum / images.len() as f64))
}

/// Trains the reference autoencoder and freezes it.
///
/// `eval` is the held-out split used for the summary metrics.
pub fn train_reference(
    arch: ArchConfig,
    train: &[ImageF32],
    eval: &[ImageF32],
    hp: &ReferenceHParams,
) -> Result<(ReferenceAutoencoder, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_common(hp.learning_rate, hp.batch_size)?;
    let started = Instant::now();
    let mut ae = ReferenceAutoencoder::build(arch, hp.seed)?;
    let (enc, dec) = (ae.encoder_blocks(), ae.decoder_blocks());
    let (h, w) = (train[0].height(), train[0].width());
    let latent_shape = [hp.cycle_batch, LATENT_CHANNELS, h / 4, w / 4];
    let mut opt = optimizer(hp.learning_rate, hp.weight_decay, hp.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(0x5eed_0000));
    let mut curve = Vec::with_capacity(hp.steps);

    for step in 0..hp.steps {
        let batch = sample_batch(train, hp.batch_size, &mut rng)?;
        let mut g = Graph::new();
        let b = ae.params().bind(&mut g, true);
        let x = g.constant(batch);
        let z = run_blocks(&mut g, &b, &enc, x, None)?;
        let y = run_blocks(&mut g, &b, &dec, z, None)?;
        let rec = g.mse(y, x)?;
        let mut components = BTreeMap::new();
        components.insert("reconstruction".to_string(), value(&g, rec));
        let mut total = Some(rec);

        if hp.latent_weight > 0.0 {
            let m = g.mean(z);
            let m2 = g.square(m);
            let sq = g.square(z);
            let v = g.mean(sq);
            let v = g.add_scalar(v, -1.0);
            let v2 = g.square(v);
            let lat = g.add(m2, v2)?;
            components.insert("latent".to_string(), value(&g, lat));
            total = accumulate(&mut g, total, lat, hp.latent_weight)?;
        }
        if hp.cycle_weight > 0.0 && hp.cycle_batch > 0 {
            let e = g.constant(normal_tensor(&latent_shape, &mut rng));
            let d = run_blocks(&mut g, &b, &dec, e, None)?;
            let back = run_blocks(&mut g, &b, &enc, d, None)?;
            let cyc = g.mse(back, e)?;
            components.insert("cycle".to_string(), value(&g, cyc));
            total = accumulate(&mut g, total, cyc, hp.cycle_weight)?;
        }
        let total = total.expect("reconstruction term present");
        let loss = value(&g, total);
        if !loss.is_finite() {
            return Err(step_error(step, format!("non-finite loss {loss}")));
        }
        let mut grads = g.backward(total).map_err(|e| step_error(step, e))?;
        let grads = ae.params().collect_grads(&b, &mut grads);
        let info = opt.adamw_step(ae.params_mut(), &grads).map_err(|e| step_error(step, e))?;
        curve.push(StepRecord { step, total: loss, components, grad_norm: info.grad_norm });
    }
    ae.freeze();

    let (eval_psnr, eval_ssim) = if eval.is_empty() { (f64::NAN, f64::NAN) } else { reconstruction_quality(&ae, eval)? };
    let summary = TrainSummary {
        stage: "reference".into(),
        steps: hp.steps,
        final_loss: curve.last().map(|r| r.total),
        eval_subject: "reference reconstruction".into(),
        eval_reference: "held-out input".into(),
        eval_psnr,
        eval_ssim,
        eval_samples: eval.len(),
        hparams: serde_json::to_value(hp)?,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((ae, TrainReport { curve, summary }))
}

/// Hinge `relu(margin - d)` on a scalar node.
fn hinge(g: &mut Graph<f32>, d: Var, margin: f64) -> Var {
    let neg = g.scale(d, -1.0);
    let shifted = g.add_scalar(neg, margin as f32);
    g.relu(shifted)
}

/// MAE of each batch item as its own scalar node.
fn per_sample_mae(g: &mut Graph<f32>, y: Var, t: Var) -> Result<Vec<Var>> {
    let shape = g.shape(y).to_vec();
    let per: usize = shape[1..].iter().product();
    (0..shape[0])
        .map(|i| {
            let a = g.slice_flat(y, i * per, &[per])?;
            let b = g.slice_flat(t, i * per, &[per])?;
            g.mae(a, b).map_err(Error::from)
        })
        .collect()
}

/// Mean of `relu(margin_i - d_i)`.
fn mean_hinge(g: &mut Graph<f32>, d: &[Var], margins: &[f64]) -> Result<Var> {
    let mut total = None;
    for (&di, &m) in d.iter().zip(margins) {
        let h = hinge(g, di, m);
        total = accumulate(g, total, h, 1.0 / d.len() as f64)?;
    }
    Ok(total.expect("non-empty batch"))
}

/// Stage-1 training of the fuser and fine-tuning layers against reference decodes.
pub fn train_gated(
    reference: &ReferenceAutoencoder,
    structure: StructureConfig,
    key: &FuserKey,
    train: &[ImageF32],
    eval_latents: &Tensor<f32>,
    hp: &TrainHParams,
) -> Result<(GatedDecoder, TrainReport)> {
    let decoder = GatedDecoder::build(reference, structure, hp.seed)?;
    fine_tune(decoder, reference, key, train, eval_latents, hp)
}

fn check_frozen_subset(decoder: &GatedDecoder, reference: &ReferenceAutoencoder, step: usize) -> Result<()> {
    for (name, p) in reference.params().iter().filter(|(n, _)| n.starts_with("dec.")) {
        let q = decoder
            .params()
            .get(name)
            .ok_or_else(|| step_error(step, format!("reference layer `{name}` missing")))?;
        if !q.frozen {
            return Err(step_error(step, format!("reference layer `{name}` is not frozen")));
        }
        if !q.tensor.bit_eq(&p.tensor) {
            return Err(step_error(step, format!("frozen layer `{name}` differs from the reference")));
        }
    }
    Ok(())
}

/// Trains an already built gated decoder. Fails if any reference layer is trainable or altered.
pub fn fine_tune(
    mut decoder: GatedDecoder,
    reference: &ReferenceAutoencoder,
    key: &FuserKey,
    train: &[ImageF32],
    eval_latents: &Tensor<f32>,
    hp: &TrainHParams,
) -> Result<(GatedDecoder, TrainReport)> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_frozen_subset(&decoder, reference, 0)?;
    let started = Instant::now();
    let blocks = decoder.blocks(&crate::keying::RemovalHypothesis::KEEP_ALL)?;
    let extractor = FeatureExtractor::new(hp.feature_seed);
    let mut opt = optimizer(hp.learning_rate, hp.weight_decay, hp.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(0x5eed_0001));

    let pool = encode_all(reference, train)?;
    let zs = &pool[0].shape().to_vec();
    let n_normal = ((hp.batch_size as f64) * hp.normal_fraction).round() as usize;
    let n_encoded = hp.batch_size - n_normal;
    let mut curve = Vec::with_capacity(hp.steps);

    for step in 0..hp.steps {
        let mut items: Vec<Tensor<f32>> = (0..n_encoded).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
        items.extend((0..n_normal).map(|_| normal_tensor(zs, &mut rng)));
        let latents = Tensor::stack(&items)?;
        let target = reference.decode(&latents)?;
        let wrong: Vec<FuserKey> = (0..if hp.lambda3 > 0.0 { hp.wrong_keys_per_step } else { 0 })
            .map(|_| random_wrong_key(key, &mut rng))
            .collect();

        let mut g = Graph::new();
        let b = decoder.params().bind(&mut g, true);
        let fb = extractor.params().bind(&mut g, false);
        let z = g.constant(latents);
        let t = g.constant(target);
        let k = g.constant(key_tensor(key));
        let y = run_blocks(&mut g, &b, &blocks, z, Some(k))?;

        let mut components = BTreeMap::new();
        let mut total = None;
        let mae = g.mae(y, t)?;
        components.insert("mae".to_string(), value(&g, mae));
        total = accumulate(&mut g, total, mae, hp.lambda1)?;
        if hp.lambda2 > 0.0 {
            let perc = extractor.distance_node(&mut g, &fb, y, t)?;
            components.insert("perceptual".to_string(), value(&g, perc));
            total = accumulate(&mut g, total, perc, hp.lambda2)?;
        }
        let mut wrong_mae = vec![0.0; hp.batch_size];
        if !wrong.is_empty() {
            let mut rep: Option<Var> = None;
            for wk in &wrong {
                let kw = g.constant(key_tensor(wk));
                let yw = run_blocks(&mut g, &b, &blocks, z, Some(kw))?;
                let d = per_sample_mae(&mut g, yw, t)?;
                for (acc, &v) in wrong_mae.iter_mut().zip(&d) {
                    *acc += value(&g, v) / wrong.len() as f64;
                }
                let mut h = mean_hinge(&mut g, &d, &vec![hp.margin; d.len()])?;
                if let Some(max) = hp.margin_max {
                    let mut over = None;
                    for &di in &d {
                        let o = g.add_scalar(di, -max as f32);
                        let o = g.relu(o);
                        over = accumulate(&mut g, over, o, 1.0 / d.len() as f64)?;
                    }
                    h = g.add(h, over.expect("non-empty batch"))?;
                }
                rep = accumulate(&mut g, rep, h, 1.0 / wrong.len() as f64)?;
            }
            let rep = rep.expect("at least one wrong key");
            components.insert("repulsion".to_string(), value(&g, rep));
            total = accumulate(&mut g, total, rep, hp.lambda3)?;
        }
        if hp.lambda_bypass > 0.0 {
            let yb = run_blocks(&mut g, &b, &blocks, z, None)?;
            let d = per_sample_mae(&mut g, yb, t)?;
            let margins: Vec<f64> = wrong_mae.iter().map(|w| w + hp.bypass_gap).collect();
            let h = mean_hinge(&mut g, &d, &margins)?;
            components.insert("bypass".to_string(), value(&g, h));
            total = accumulate(&mut g, total, h, hp.lambda_bypass)?;
        }
        let total = total.expect("MAE term present");
        let loss = value(&g, total);
        if !loss.is_finite() {
            return Err(step_error(step, format!("non-finite loss {loss}")));
        }
        let mut grads = g.backward(total).map_err(|e| step_error(step, e))?;
        let grads = decoder.params().collect_grads(&b, &mut grads);
        let info = opt.adamw_step(decoder.params_mut(), &grads).map_err(|e| step_error(step, e))?;
        curve.push(StepRecord { step, total: loss, components, grad_norm: info.grad_norm });
    }
    check_frozen_subset(&decoder, reference, hp.steps)?;

    let (eval_psnr, eval_ssim, eval_samples) = if eval_latents.numel() == 0 {
        (f64::NAN, f64::NAN, 0)
    } else {
        let out = from_batch(&decoder.decode(eval_latents, Some(key))?.images)?;
        let tgt = from_batch(&reference.decode(eval_latents)?)?;
        let n = out.len() as f64;
        let mut p = 0.0;
        let mut s = 0.0;
        for (o, t) in out.iter().zip(&tgt) {
            p += psnr(o, t)?;
            s += ssim(o, t)?;
        }
        (p / n, s / n, out.len())
    };
    let summary = TrainSummary {
        stage: "gated".into(),
        steps: hp.steps,
        final_loss: curve.last().map(|r| r.total),
        eval_subject: "gated decode with registered key".into(),
        eval_reference: "reference decode".into(),
        eval_psnr,
        eval_ssim,
        eval_samples,
        hparams: serde_json::to_value(hp)?,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((decoder, TrainReport { curve, summary }))
}

/// Encodes images one latent per item.
pub fn encode_all(reference: &ReferenceAutoencoder, images: &[ImageF32]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        out.extend(reference.encode(&to_batch(chunk)?)?.unstack());
    }
    Ok(out)
}

/// Mean absolute difference between two image sets.
pub fn mae_loss(a: &[ImageF32], b: &[ImageF32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config(format!("image counts differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        x.same_dims(y)?;
        sum += x.data().iter().zip(y.data()).map(|(&p, &q)| (p as f64 - q as f64).abs()).sum::<f64>();
        count += x.data().len();
    }
    Ok(sum / count as f64)
}

/// Perceptual proxy distance between two image sets.
pub fn perceptual_distance(extractor: &FeatureExtractor, a: &[ImageF32], b: &[ImageF32]) -> Result<f64> {
    extractor.distance(a, b)
}

/// Wrong-key hinge `relu(margin - MAE(D_wrong(z), D_ref(z)))` averaged over sampled wrong keys.
pub fn repulsion_loss(
    decoder: &GatedDecoder,
    reference: &ReferenceAutoencoder,
    latents: &Tensor<f32>,
    correct_key: &FuserKey,
    samples: usize,
    margin: f64,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::config("repulsion needs at least one sampled key"));
    }
    let target = from_batch(&reference.decode(latents)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let wk = random_wrong_key(correct_key, &mut rng);
        let out = from_batch(&decoder.decode(latents, Some(&wk))?.images)?;
        total += (margin - mae_loss(&out, &target)?).max(0.0);
    }
    Ok(total / samples as f64)
}

/// Standard normal latents shaped for `n` images.
pub fn normal_latents(n: usize, height: usize, width: usize, seed: u64) -> Tensor<f32> {
    normal_tensor(&[n, LATENT_CHANNELS, height / 4, width / 4], &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Parameters that differ bitwise between two stores, limited to names present in both.
pub fn changed_parameters<T: Scalar + keygate_tensor::ToBits>(a: &ParamStore<T>, b: &ParamStore<T>) -> Vec<String> {
    a.iter()
        .filter_map(|(name, p)| {
            let q = b.get(name)?;
            (!p.tensor.bit_eq(&q.tensor)).then(|| name.to_string())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::keying::generate_key;

    fn images(n: usize) -> Vec<ImageF32> {
        generate_dataset(&DatasetSpec { count: n, ..Default::default() }).unwrap()
    }

    fn tiny_reference() -> ReferenceAutoencoder {
        let hp = ReferenceHParams { steps: 2, batch_size: 2, cycle_batch: 1, ..Default::default() };
        train_reference(ArchConfig::default(), &images(4), &images(2), &hp).unwrap().0
    }

    #[test]
    fn one_step_curve() {
        let hp = ReferenceHParams { steps: 1, batch_size: 2, ..Default::default() };
        let (ae, report) = train_reference(ArchConfig::default(), &images(3), &[], &hp).unwrap();
        assert_eq!(report.curve.len(), 1);
        assert!(ae.is_frozen());
        assert!(report.to_jsonl().unwrap().ends_with('\n'));
    }

    #[test]
    fn reference_training_is_deterministic() {
        let hp = ReferenceHParams { steps: 3, batch_size: 2, cycle_batch: 2, ..Default::default() };
        let (a, ra) = train_reference(ArchConfig::default(), &images(5), &images(2), &hp).unwrap();
        let (b, rb) = train_reference(ArchConfig::default(), &images(5), &images(2), &hp).unwrap();
        assert!(changed_parameters(a.params(), b.params()).is_empty());
        assert!(ra.same_outcome(&rb));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            train_reference(ArchConfig::default(), &[], &[], &ReferenceHParams::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn divergence_reports_step() {
        let hp = ReferenceHParams { steps: 5, batch_size: 2, learning_rate: 1e30, clip_norm: None, ..Default::default() };
        match train_reference(ArchConfig::default(), &images(3), &[], &hp) {
            Err(Error::Training { step, .. }) => assert!(step < 5),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1.summary)),
        }
    }

    #[test]
    fn gated_defaults_and_freeze() {
        let reference = tiny_reference();
        let hp = TrainHParams { steps: 3, batch_size: 2, lambda3: 0.1, ..Default::default() };
        assert_eq!((hp.lambda1, hp.lambda2, hp.learning_rate), (1.0, 1.0, 5e-5));
        let z = normal_latents(2, 32, 32, 1);
        let (d, report) =
            train_gated(&reference, StructureConfig::new(1, 1).unwrap(), &generate_key(1), &images(4), &z, &hp).unwrap();
        assert_eq!(report.summary.hparams["lambda1"], 1.0);
        assert_eq!(report.summary.hparams["lambda2"], 1.0);
        assert_eq!(report.curve.len(), 3);
        assert!(report.curve[0].components.contains_key("repulsion"));
        for (name, p) in d.params().iter().filter(|(_, p)| p.frozen) {
            assert!(p.tensor.bit_eq(reference.params().tensor(name).unwrap()));
        }
    }

    #[test]
    fn unfrozen_reference_layer_rejected() {
        let reference = tiny_reference();
        let mut d = GatedDecoder::build(&reference, StructureConfig::default(), 0).unwrap();
        d.params_mut().get_mut("dec.out.w").unwrap().frozen = false;
        let hp = TrainHParams { steps: 1, batch_size: 2, ..Default::default() };
        let z = normal_latents(1, 32, 32, 1);
        assert!(matches!(
            fine_tune(d, &reference, &generate_key(1), &images(2), &z, &hp),
            Err(Error::Training { .. })
        ));
    }

    #[test]
    fn mae_cases() {
        let a = vec![ImageF32::filled(4, 4, 3, 0.0)];
        let b = vec![ImageF32::filled(4, 4, 3, 1.0)];
        assert_eq!(mae_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mae_loss(&a, &b).unwrap(), 1.0);
        assert!(mae_loss(&a, &[ImageF32::filled(4, 5, 3, 0.0)]).is_err());
    }

    #[test]
    fn repulsion_at_identity_equals_margin() {
        let reference = tiny_reference();
        let d = GatedDecoder::build(&reference, StructureConfig::default(), 0).unwrap();
        let z = normal_latents(2, 32, 32, 3);
        let r = repulsion_loss(&d, &reference, &z, &generate_key(0), 3, 0.05, 1).unwrap();
        assert!((r - 0.05).abs() < 1e-12, "{r}");
        assert_eq!(repulsion_loss(&d, &reference, &z, &generate_key(0), 3, 0.0, 1).unwrap(), 0.0);
    }
}
