//! TOML run configuration.
//!
//! Every field has a default and unknown keys are rejected. Per-section
//! `seed` fields are offsets added to a stream derived from the top-level
//! `seed`, so `--seed` moves every random stream at once.

use std::path::{Path, PathBuf};

use keygate_core::attacks::{default_suite, AttackSpec};
use keygate_core::data::DatasetSpec;
use keygate_core::model::{ArchConfig, StructureConfig};
use keygate_core::training::{ReferenceHParams, TrainHParams};
use keygate_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_fraction: f32,
    pub dataset: DatasetSpec,
    pub arch: ArchConfig,
    pub structure: StructureConfig,
    pub reference: ReferenceHParams,
    pub gated: TrainHParams,
    pub attack: AttackConfig,
    pub watermark: WatermarkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Standard normal latents every condition is evaluated on.
    pub eval_latents: usize,
    pub wrong_key_trials: usize,
    /// Hypotheses tried by the structure search; 0 means all of them.
    pub search_budget: usize,
    /// PSNR in dB the registered key must reach and no attack may reach.
    pub authorized_psnr: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { eval_latents: 100, wrong_key_trials: 3, search_budget: 0, authorized_psnr: 30.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WatermarkConfig {
    pub payloads: usize,
    pub bits: usize,
    pub replication: usize,
    /// Post-processing attacks; the nine defaults when empty.
    pub suite: Vec<AttackSpec>,
    pub seed: u64,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        WatermarkConfig { payloads: 100, bits: 32, replication: 8, suite: Vec::new(), seed: 0 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            train_fraction: 0.8,
            dataset: DatasetSpec::default(),
            arch: ArchConfig::default(),
            structure: StructureConfig::new(2, 1).expect("valid structure"),
            reference: ReferenceHParams::default(),
            gated: TrainHParams {
                learning_rate: 5e-4,
                steps: 1200,
                lambda3: 0.1,
                margin_max: Some(0.12),
                lambda_bypass: 0.5,
                bypass_gap: 0.1,
                ..Default::default()
            },
            attack: AttackConfig::default(),
            watermark: WatermarkConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Offsets of the derived per-stream seeds.
const DATASET: u64 = 0;
const SPLIT: u64 = 1;
const REFERENCE: u64 = 2;
const GATED: u64 = 3;
const ATTACK: u64 = 4;
const WATERMARK: u64 = 5;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Keys given in `text` replace the run defaults; tables merge key by key.
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.arch.validate()?;
        self.structure.validate()?;
        self.gated.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if self.attack.eval_latents == 0 || self.attack.wrong_key_trials == 0 {
            return Err(Error::config("attack.eval_latents and attack.wrong_key_trials must be positive"));
        }
        if self.watermark.payloads == 0 {
            return Err(Error::config("watermark.payloads must be positive"));
        }
        for spec in &self.watermark.suite {
            spec.validate()?;
        }
        Ok(())
    }

    fn stream(&self, offset: u64, local: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(offset).wrapping_add(local)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec { seed: self.stream(DATASET, self.dataset.seed), ..self.dataset.clone() }
    }

    pub fn split_seed(&self) -> u64 {
        self.stream(SPLIT, 0)
    }

    pub fn reference_hparams(&self) -> ReferenceHParams {
        ReferenceHParams { seed: self.stream(REFERENCE, self.reference.seed), ..self.reference.clone() }
    }

    pub fn gated_hparams(&self) -> TrainHParams {
        TrainHParams { seed: self.stream(GATED, self.gated.seed), ..self.gated.clone() }
    }

    pub fn attack_seed(&self) -> u64 {
        self.stream(ATTACK, self.attack.seed)
    }

    pub fn watermark_seed(&self) -> u64 {
        self.stream(WATERMARK, self.watermark.seed)
    }

    pub fn watermark_suite(&self) -> Vec<AttackSpec> {
        if self.watermark.suite.is_empty() {
            default_suite(self.watermark_seed())
        } else {
            self.watermark.suite.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[gated]\nlambda4 = 1.0"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::parse("seed = 9\n[structure]\nm = 1\nn = 0\n[gated]\nsteps = 5").unwrap();
        assert_eq!((cfg.seed, cfg.structure.m, cfg.structure.n, cfg.gated.steps), (9, 1, 0, 5));
        assert_eq!(cfg.gated.lambda1, 1.0);
        assert_eq!(cfg.gated.bypass_gap, RunConfig::default().gated.bypass_gap);
        assert_eq!(cfg.attack, AttackConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn master_seed_moves_every_stream() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.dataset_spec().seed, b.dataset_spec().seed);
        assert_ne!(a.reference_hparams().seed, b.reference_hparams().seed);
        assert_ne!(a.gated_hparams().seed, b.gated_hparams().seed);
        assert_ne!(a.attack_seed(), b.attack_seed());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("train_fraction = 1.5").is_err());
        assert!(RunConfig::parse("[structure]\nm = -1").is_err());
        assert!(RunConfig::parse("[[watermark.suite]]\nkind = \"crop\"\nfraction = 0.0").is_err());
    }

    #[test]
    fn custom_suite_parses() {
        let cfg = RunConfig::parse("[[watermark.suite]]\nkind = \"jpeg_proxy\"\nquality = 50\nseed = 3").unwrap();
        assert_eq!(cfg.watermark_suite().len(), 1);
        assert_eq!(cfg.watermark_suite()[0].label(), "jpeg_50");
    }
}
