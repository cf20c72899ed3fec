//! `keygate` command-line pipeline: data generation, both training stages,
//! generation, attack evaluation, watermark robustness and reporting.
//!
//! A run directory holds every artifact:
//!
//! ```text
//! data/{train,eval}/NNNN.ppm   reference.ckpt   gated.ckpt
//! *_curve.jsonl  *_summary.json  attack/metrics.json  attack/search.jsonl
//! watermark.csv  report.csv  generated/NNNN.ppm
//! ```

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use keygate_core::attacks::{
    authorized_report, brute_force_search, partial_removal_attack, reference_images, remove_fuser_attack,
    restoration_report, sample_wrong_keys, wrong_key_attack,
};
use keygate_core::data::{generate_dataset, split};
use keygate_core::features::FeatureExtractor;
use keygate_core::image::from_batch;
use keygate_core::io::{load_image, save_image, Checkpoint};
use keygate_core::keying::{crack_time, parse_key, FuserKey};
use keygate_core::metrics::{Condition, MetricsReport};
use keygate_core::model::{GatedDecoder, ReferenceAutoencoder, StructureConfig};
use keygate_core::training::{normal_latents, train_gated, train_reference, TrainReport};
use keygate_core::watermark::{robustness_eval, WatermarkPayload};
use keygate_core::{Error, ImageF32, Result};
use serde_json::json;

pub use config::RunConfig;

/// Environment variable consulted when `--key` is absent.
pub const KEY_ENV: &str = "KEYGATE_KEY";

#[derive(Debug, Parser)]
#[command(name = "keygate", about = "Key-gated decoder training and attack evaluation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct KeyArg {
    /// 128-bit key as 32 hex characters; falls back to $KEYGATE_KEY.
    #[arg(long)]
    key: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic corpus and its train/eval split as PPM files.
    GenData(Common),
    /// Train and freeze the reference autoencoder.
    TrainRef(Common),
    /// Add fusers and fine-tuning layers and train them for one key.
    #[command(name = "train-pcdiff")]
    TrainGated {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        key: KeyArg,
    },
    /// Decode standard normal latents through the gated decoder.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        key: KeyArg,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Evaluate wrong-key, fuser-removal, partial-removal and restoration attacks.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        key: KeyArg,
    },
    /// Watermark bit accuracy through the reference and gated decoders.
    WatermarkEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        key: KeyArg,
    },
    /// Exhaustive structure-search cost for m added mid blocks and n pairs per stage.
    CrackTime {
        #[arg(long, allow_negative_numbers = true)]
        m: i64,
        #[arg(long, allow_negative_numbers = true)]
        n: i64,
        /// Seconds to test one hypothesis.
        #[arg(long = "t-test")]
        t_test: f64,
    },
    /// Summary CSV of a finished attack run.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Runs one command line and returns its exit code: 0 on success, 1 for
/// usage and configuration errors, 2 for runtime failures.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Key(_) | Error::Capacity(_) => 1,
        _ => 2,
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData(c) => gen_data(&resolve(&c)?, err),
        Command::TrainRef(c) => train_ref(&resolve(&c)?, err),
        Command::TrainGated { common, key } => train_gated_cmd(&resolve(&common)?, &resolve_key(&key)?, err),
        Command::Generate { common, key, count } => generate(&resolve(&common)?, key_if_any(&key)?, count, err),
        Command::Attack { common, key } => attack(&resolve(&common)?, &resolve_key(&key)?, err),
        Command::WatermarkEval { common, key } => watermark_eval(&resolve(&common)?, &resolve_key(&key)?, out),
        Command::CrackTime { m, n, t_test } => {
            let est = crack_time(m, n, t_test)?;
            writeln!(out, "{{\"combinations\":{},\"t_crack_s\":{}}}", est.combination_count, json_number(est.t_crack))?;
            Ok(())
        }
        Command::Report { input } => {
            let csv = report(&input)?;
            fs::write(input.join("report.csv"), &csv)?;
            write!(out, "{csv}")?;
            Ok(())
        }
    }
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn key_if_any(k: &KeyArg) -> Result<Option<FuserKey>> {
    let (text, source) = match &k.key {
        Some(v) => (v.clone(), "--key".to_string()),
        None => match std::env::var(KEY_ENV) {
            Ok(v) => (v, KEY_ENV.to_string()),
            Err(_) => return Ok(None),
        },
    };
    parse_key(text.trim()).map(Some).map_err(|e| Error::Key(format!("invalid {source}: {e}")))
}

fn resolve_key(k: &KeyArg) -> Result<FuserKey> {
    key_if_any(k)?.ok_or_else(|| Error::Key(format!("a key is required: pass --key or set {KEY_ENV}")))
}

/// Whole numbers print without a fractional part.
fn json_number(v: f64) -> String {
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15 {
        format!("{}", v as i64)
    } else {
        serde_json::Number::from_f64(v).map(|n| n.to_string()).unwrap_or_else(|| "null".into())
    }
}

fn write_images(dir: &Path, images: &[ImageF32]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, img) in images.iter().enumerate() {
        save_image(&dir.join(format!("{i:04}.ppm")), img)?;
    }
    Ok(())
}

fn read_images(dir: &Path) -> Result<Vec<ImageF32>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e} (run gen-data first)", dir.display()))))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    paths.iter().map(|p| load_image(p)).collect()
}

fn save_report(dir: &Path, stem: &str, report: &TrainReport) -> Result<()> {
    fs::write(dir.join(format!("{stem}_curve.jsonl")), report.to_jsonl()?)?;
    fs::write(dir.join(format!("{stem}_summary.json")), serde_json::to_string_pretty(&report.summary)? + "\n")?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, err: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let images = generate_dataset(&cfg.dataset_spec())?;
    let (train, eval) = split(&images, cfg.train_fraction, cfg.split_seed())?;
    let data = cfg.out_dir.join("data");
    write_images(&data.join("train"), &train)?;
    write_images(&data.join("eval"), &eval)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    writeln!(err, "wrote {} train and {} eval images to {}", train.len(), eval.len(), data.display())?;
    Ok(())
}

fn load_split(cfg: &RunConfig) -> Result<(Vec<ImageF32>, Vec<ImageF32>)> {
    let data = cfg.out_dir.join("data");
    Ok((read_images(&data.join("train"))?, read_images(&data.join("eval"))?))
}

fn train_ref(cfg: &RunConfig, err: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let (train, eval) = load_split(cfg)?;
    let hp = cfg.reference_hparams();
    let (ae, report) = train_reference(cfg.arch, &train, &eval, &hp)?;
    let meta = json!({ "kind": "reference", "arch": cfg.arch, "hparams": hp });
    Checkpoint::from_params(ae.params(), meta).save(&cfg.out_dir.join("reference.ckpt"))?;
    save_report(&cfg.out_dir, "reference", &report)?;
    writeln!(err, "reference: held-out PSNR {:.2} dB after {} steps", report.summary.eval_psnr, hp.steps)?;
    Ok(())
}

pub fn load_reference(cfg: &RunConfig) -> Result<ReferenceAutoencoder> {
    let ckpt = Checkpoint::load(&cfg.out_dir.join("reference.ckpt"))?;
    ReferenceAutoencoder::from_params(cfg.arch, ckpt.to_params())
}

fn fingerprint_salt(cfg: &RunConfig) -> Vec<u8> {
    format!("keygate-run-{}", cfg.gated_hparams().seed).into_bytes()
}

fn train_gated_cmd(cfg: &RunConfig, key: &FuserKey, err: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let (train, _) = load_split(cfg)?;
    let reference = load_reference(cfg)?;
    let hp = cfg.gated_hparams();
    let eval = normal_latents(cfg.attack.eval_latents, cfg.dataset.height, cfg.dataset.width, cfg.attack_seed());
    let (decoder, report) = train_gated(&reference, cfg.structure.clone(), key, &train, &eval, &hp)?;
    let meta = json!({
        "kind": "gated",
        "arch": cfg.arch,
        "structure": cfg.structure,
        "key_fingerprint": key.fingerprint(&fingerprint_salt(cfg)),
        "hparams": hp,
    });
    Checkpoint::from_params(decoder.params(), meta).save(&cfg.out_dir.join("gated.ckpt"))?;
    save_report(&cfg.out_dir, "gated", &report)?;
    writeln!(err, "gated: registered-key PSNR {:.2} dB against the reference decode", report.summary.eval_psnr)?;
    Ok(())
}

/// Loads the gated decoder and its stored key fingerprint.
pub fn load_gated(cfg: &RunConfig) -> Result<(GatedDecoder, Option<String>)> {
    let ckpt = Checkpoint::load(&cfg.out_dir.join("gated.ckpt"))?;
    let structure: StructureConfig = match ckpt.metadata.get("structure") {
        Some(s) => serde_json::from_value(s.clone())?,
        None => cfg.structure.clone(),
    };
    let fingerprint = ckpt.metadata.get("key_fingerprint").and_then(|v| v.as_str()).map(String::from);
    Ok((GatedDecoder::from_params(cfg.arch, structure, ckpt.to_params())?, fingerprint))
}

fn check_registered(key: &FuserKey, fingerprint: &Option<String>) -> Result<()> {
    match fingerprint {
        Some(f) if !key.matches_fingerprint(f) => {
            Err(Error::Key("key does not match the fingerprint stored in gated.ckpt".into()))
        }
        _ => Ok(()),
    }
}

fn generate(cfg: &RunConfig, key: Option<FuserKey>, count: usize, err: &mut dyn Write) -> Result<()> {
    if count == 0 {
        return Err(Error::config("--count must be positive"));
    }
    let (decoder, fingerprint) = load_gated(cfg)?;
    match &key {
        None => writeln!(err, "warning: no key given, decoding with fusers bypassed")?,
        Some(k) if check_registered(k, &fingerprint).is_err() => {
            writeln!(err, "warning: key does not match the registered fingerprint")?
        }
        _ => {}
    }
    let z = normal_latents(count, cfg.dataset.height, cfg.dataset.width, cfg.attack_seed().wrapping_add(1));
    let images = from_batch(&decoder.decode(&z, key.as_ref())?.images)?;
    let dir = cfg.out_dir.join("generated");
    write_images(&dir, &images)?;
    writeln!(err, "wrote {count} images to {}", dir.display())?;
    Ok(())
}

/// Every condition of the attack suite, authorized first.
pub fn attack_reports(
    cfg: &RunConfig,
    decoder: &GatedDecoder,
    key: &FuserKey,
) -> Result<(Vec<MetricsReport>, keygate_core::attacks::SearchOutcome)> {
    let extractor = FeatureExtractor::default();
    let z = normal_latents(cfg.attack.eval_latents, cfg.dataset.height, cfg.dataset.width, cfg.attack_seed());
    let seed = cfg.attack_seed();
    let targets = reference_images(decoder, &z)?;
    let mut rows = vec![
        authorized_report(decoder, &z, key, &extractor)?,
        wrong_key_attack(decoder, &z, key, cfg.attack.wrong_key_trials, seed, &extractor)?,
        remove_fuser_attack(decoder, &z, &extractor)?,
    ];
    let s = decoder.structure();
    let count = keygate_core::keying::combination_count(s.m, s.n)? as usize;
    let budget = if cfg.attack.search_budget == 0 { count } else { cfg.attack.search_budget.min(count) };
    let search = brute_force_search(decoder, &z, budget, seed)?;
    let mut best = partial_removal_attack(&decoder.without_fusers(), &search.best.hypothesis, &z, &extractor)?;
    best.subject = format!("best of {budget} removal hypotheses: {}", search.best.hypothesis);
    rows.push(best);
    let wrong = from_batch(&decoder.decode(&z, Some(&sample_wrong_keys(key, 1, seed)[0]))?.images)?;
    rows.push(restoration_report(Condition::WrongKey, &wrong, &targets, &extractor)?);
    let stripped = from_batch(&decoder.without_fusers().decode(&z, None)?.images)?;
    rows.push(restoration_report(Condition::NoFuser, &stripped, &targets, &extractor)?);
    Ok((rows, search))
}

fn attack(cfg: &RunConfig, key: &FuserKey, err: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let (decoder, fingerprint) = load_gated(cfg)?;
    check_registered(key, &fingerprint)?;
    let (rows, search) = attack_reports(cfg, &decoder, key)?;
    let dir = cfg.out_dir.join("attack");
    fs::create_dir_all(&dir)?;
    let doc = json!({ "authorized_psnr": cfg.attack.authorized_psnr, "conditions": rows });
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    fs::write(dir.join("search.jsonl"), search.to_jsonl()?)?;
    for r in &rows {
        writeln!(err, "{:<10} {:>7.2} dB  SSIM {:.3}  ({})", r.condition.as_str(), r.psnr, r.ssim, r.subject)?;
    }
    Ok(())
}

/// CSV of the stored attack metrics with a verdict against the authorized threshold.
pub fn report(run_dir: &Path) -> Result<String> {
    let path = run_dir.join("attack").join("metrics.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e} (run attack first)", path.display()))))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let tau = doc["authorized_psnr"].as_f64().ok_or_else(|| Error::Format("metrics.json lacks authorized_psnr".into()))?;
    let rows: Vec<MetricsReport> = serde_json::from_value(doc["conditions"].clone())?;
    let mut csv = format!("{},reaches_authorized\n", MetricsReport::CSV_HEADER);
    for r in &rows {
        csv.push_str(&format!("{},{}\n", r.csv_row(), r.psnr >= tau));
    }
    Ok(csv)
}

fn watermark_eval(cfg: &RunConfig, key: &FuserKey, out: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let reference = load_reference(cfg)?;
    let (decoder, fingerprint) = load_gated(cfg)?;
    check_registered(key, &fingerprint)?;
    let w = &cfg.watermark;
    let seed = cfg.watermark_seed();
    let payloads = (0..w.payloads as u64)
        .map(|i| WatermarkPayload::random(w.bits, w.replication, seed, seed.wrapping_add(1000 + i)))
        .collect::<Result<Vec<_>>>()?;
    let suite = cfg.watermark_suite();
    let plain = robustness_eval("reference", &payloads, seed, |z| reference.decode(z), &reference, &suite)?;
    let gated = robustness_eval("gated", &payloads, seed, |z| Ok(decoder.decode(z, Some(key))?.images), &reference, &suite)?;
    let csv = format!("{}\n{}\n{}\n", plain.csv_header(), plain.csv_row(), gated.csv_row());
    fs::write(cfg.out_dir.join("watermark.csv"), &csv)?;
    write!(out, "{csv}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("keygate").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn crack_time_json() {
        let (code, out, _) = run_args(&["crack-time", "--m", "6", "--n", "5", "--t-test", "10"]);
        assert_eq!(code, 0);
        assert_eq!(out.trim(), r#"{"combinations":244,"t_crack_s":2440}"#);
    }

    #[test]
    fn fractional_crack_time_keeps_decimals() {
        let (_, out, _) = run_args(&["crack-time", "--m", "0", "--n", "0", "--t-test", "0.25"]);
        assert_eq!(out.trim(), r#"{"combinations":2,"t_crack_s":0.5}"#);
    }

    #[test]
    fn negative_counts_are_config_errors() {
        let (code, _, err) = run_args(&["crack-time", "--m", "-1", "--n", "0", "--t-test", "1"]);
        assert_eq!(code, 1, "{err}");
    }

    #[test]
    fn short_key_names_the_flag() {
        let (code, _, err) = run_args(&["generate", "--key", &"a".repeat(31)]);
        assert_eq!(code, 1);
        assert!(err.contains("--key"), "{err}");
    }

    #[test]
    fn unknown_subcommand_and_flag() {
        let (code, _, err) = run_args(&["frobnicate"]);
        assert_eq!(code, 1);
        assert!(err.to_lowercase().contains("usage"), "{err}");
        assert_eq!(run_args(&["crack-time", "--bogus"]).0, 1);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("crack-time"));
    }

    #[test]
    fn missing_inputs_are_runtime_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (code, _, err) = run_args(&["train-ref", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code, 2, "{err}");
        let (code, _, _) = run_args(&["report", "--in", dir.path().to_str().unwrap()]);
        assert_eq!(code, 2);
    }

    #[test]
    fn bad_config_is_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "not_a_field = 3").unwrap();
        let (code, _, err) = run_args(&["gen-data", "--config", p.to_str().unwrap()]);
        assert_eq!(code, 1);
        assert!(err.contains("not_a_field"), "{err}");
    }

    #[test]
    fn json_numbers() {
        assert_eq!(json_number(2440.0), "2440");
        assert_eq!(json_number(1.5), "1.5");
    }
}
