//! Reference autoencoder and the key-gated decoder built on top of it.

mod layout;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use keygate_tensor::{Graph, ParamStore, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::keying::{FuserKey, RemovalHypothesis, KEY_BITS, ORIGINAL_MID_BLOCKS, UP_STAGES};

pub use layout::{fuser_forward, run_blocks, Activation, Block};

/// Width of the key embedding.
pub const EMBED_DIM: usize = 256;
/// Hidden width of the weight generator.
pub const GEN_HIDDEN: usize = 64;
/// Generated values per channel: a 3×3 kernel and a bias.
pub const GEN_PER_CHANNEL: usize = 10;
pub const LATENT_CHANNELS: usize = 4;

/// Channel widths of the autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_channels: usize,
    pub encoder: [usize; 2],
    /// Width at the decoder bottleneck and in the first upsampling stage.
    pub bottleneck: usize,
    /// Width of the later upsampling stages.
    pub hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { image_channels: 3, encoder: [16, 32], bottleneck: 24, hidden: 12 }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.image_channels, self.encoder[0], self.encoder[1], self.bottleneck, self.hidden].contains(&0) {
            return Err(Error::config("architecture widths must be positive"));
        }
        Ok(())
    }

    /// Channel count flowing through upsampling stage `s`.
    pub fn stage_channels(&self, s: usize) -> usize {
        if s == 0 {
            self.bottleneck
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuserSlot {
    /// After the decoder's input projection.
    Input,
    /// Just before the output convolution.
    BeforeOutput,
}

impl FuserSlot {
    pub fn param_prefix(self) -> &'static str {
        match self {
            FuserSlot::Input => "fuser.input",
            FuserSlot::BeforeOutput => "fuser.output",
        }
    }
}

/// Added fine-tuning layers and fuser placement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureConfig {
    /// Added mid blocks.
    pub m: i64,
    /// Added up/down pairs in each upsampling stage.
    pub n: i64,
    pub fusers: Vec<FuserSlot>,
    pub label: Option<String>,
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig { m: 0, n: 0, fusers: vec![FuserSlot::Input, FuserSlot::BeforeOutput], label: None }
    }
}

impl StructureConfig {
    pub fn new(m: i64, n: i64) -> Result<Self> {
        let s = StructureConfig { m, n, ..Default::default() };
        s.validate()?;
        Ok(s)
    }

    /// Variant labels `"a-b"` (or `"ab"` for single-digit `b`) count total mid
    /// blocks `a` and up layers per stage `b`, so `m = a - 2`, `n = b - 1`.
    pub fn from_label(label: &str) -> Result<Self> {
        let (a, b) = match label.split_once('-') {
            Some(parts) => parts,
            None if label.len() >= 2 && label.is_char_boundary(label.len() - 1) => label.split_at(label.len() - 1),
            None => return Err(Error::config(format!("unrecognized structure label `{label}`"))),
        };
        let parse = |s: &str| {
            s.parse::<i64>().map_err(|_| Error::config(format!("unrecognized structure label `{label}`")))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        let mut s = StructureConfig::new(a - ORIGINAL_MID_BLOCKS as i64, b - 1)?;
        s.label = Some(label.to_string());
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 0 || self.n < 0 {
            return Err(Error::config(format!("m and n must be non-negative, got m={}, n={}", self.m, self.n)));
        }
        for (i, f) in self.fusers.iter().enumerate() {
            if self.fusers[..i].contains(f) {
                return Err(Error::config(format!("fuser slot {f:?} listed twice")));
            }
        }
        Ok(())
    }

    pub fn mids(&self) -> usize {
        self.m as usize
    }

    pub fn pairs(&self) -> usize {
        self.n as usize
    }

    /// Added mid blocks placed ahead of the originals.
    pub fn mids_before(&self) -> usize {
        self.mids().div_ceil(2)
    }

    /// Parameter prefix of every mid block in chain order.
    pub fn mid_chain(&self) -> Vec<String> {
        let before = self.mids_before();
        (0..self.mids() + ORIGINAL_MID_BLOCKS)
            .map(|k| {
                if k < before {
                    format!("ft.mid.{k}")
                } else if k < before + ORIGINAL_MID_BLOCKS {
                    format!("dec.mid.{}", k - before)
                } else {
                    format!("ft.mid.{}", k - ORIGINAL_MID_BLOCKS)
                }
            })
            .collect()
    }

    /// Indices of the two original blocks in [`Self::mid_chain`].
    pub fn original_mid_indices(&self) -> (usize, usize) {
        (self.mids_before(), self.mids_before() + 1)
    }

    /// Index of the original up layer within each stage's candidates.
    pub fn original_up_index(&self) -> usize {
        self.pairs()
    }

    pub fn check_hypothesis(&self, h: &RemovalHypothesis) -> Result<()> {
        let mids = self.mids() + ORIGINAL_MID_BLOCKS;
        if let Some((i, j)) = h.mid_survivors {
            if i >= j || j >= mids {
                return Err(Error::config(format!("mid survivors ({i}, {j}) invalid for {mids} mid blocks")));
            }
        }
        if let Some(ups) = h.up_survivors {
            if let Some(u) = ups.iter().find(|&&u| u > self.pairs()) {
                return Err(Error::config(format!("up survivor {u} invalid for {} candidates", self.pairs() + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    He,
    /// Identity for the centre tap of a square kernel, plus small noise.
    NearIdentity,
    Small,
    Zero,
}

const SMALL_STD: f64 = 1e-4;

fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let fan_in: usize = shape[1..].iter().product();
    let sample = |std: f64, rng: &mut ChaCha8Rng| Normal::new(0.0, std).expect("finite std").sample(rng) as f32;
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::He => {
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| sample(std, rng))
        }
        Init::Small => Tensor::from_fn(shape, |_| sample(SMALL_STD, rng)),
        Init::NearIdentity => {
            let (o, i, k) = (shape[0], shape[1], shape[2]);
            let centre = (k / 2) * k + k / 2;
            Tensor::from_fn(shape, |idx| {
                let noise = sample(SMALL_STD, rng);
                let (oc, rest) = (idx / (i * k * k), idx % (i * k * k));
                if oc < o && rest / (k * k) == oc && rest % (k * k) == centre {
                    1.0 + noise
                } else {
                    noise
                }
            })
        }
    }
}

struct Builder {
    store: ParamStore<f32>,
    rng: ChaCha8Rng,
    frozen: bool,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed), frozen: false }
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, init: Init) {
        let w = init_tensor(&[out, inp, k, k], init, &mut self.rng);
        self.store.insert(format!("{name}.w"), w, self.frozen);
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[out]), self.frozen);
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, init: Init) {
        let w = init_tensor(&[out, inp], init, &mut self.rng);
        self.store.insert(format!("{name}.w"), w, self.frozen);
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[out]), self.frozen);
    }

    fn mid(&mut self, name: &str, c: usize, conv2: Init) {
        self.conv(&format!("{name}.conv1"), c, c, 3, Init::He);
        self.conv(&format!("{name}.conv2"), c, c, 3, conv2);
    }

    fn fuser(&mut self, prefix: &str, channels: usize) {
        self.linear(&format!("{prefix}.emb"), EMBED_DIM, KEY_BITS, Init::He);
        self.linear(&format!("{prefix}.gen1"), GEN_HIDDEN, EMBED_DIM, Init::He);
        self.linear(&format!("{prefix}.gen2"), channels * GEN_PER_CHANNEL, GEN_HIDDEN, Init::Zero);
    }
}

fn slot_channels(arch: &ArchConfig, slot: FuserSlot) -> usize {
    match slot {
        FuserSlot::Input => arch.bottleneck,
        FuserSlot::BeforeOutput => arch.hidden,
    }
}

/// Bipolar key as a `1×128` tensor.
pub fn key_tensor<T: Scalar>(key: &FuserKey) -> Tensor<T> {
    Tensor::from_fn(&[1, KEY_BITS], |i| T::of_f64(key.bipolar()[i]))
}

/// Evaluates `blocks` on `input` without recording gradients.
pub fn infer(params: &ParamStore<f32>, blocks: &[Block], input: &Tensor<f32>, key: Option<&FuserKey>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let k = key.map(|k| g.constant(key_tensor(k)));
    let y = run_blocks(&mut g, &b, blocks, x, k)?;
    Ok(g.value(y).clone())
}

fn check_latents(arch: &ArchConfig, latents: &Tensor<f32>) -> Result<()> {
    let s = latents.shape();
    if s.len() != 4 || s[1] != LATENT_CHANNELS || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) || s[2] == 0 {
        return Err(Error::Decode(format!("expected N×{LATENT_CHANNELS}×H×W latents with even H, W, got {s:?}")));
    }
    let _ = arch;
    Ok(())
}

/// Encoder and two-mid-block decoder used as the frozen original model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceAutoencoder {
    arch: ArchConfig,
    params: ParamStore<f32>,
}

impl ReferenceAutoencoder {
    pub fn build(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder::new(seed);
        let [e0, e1] = arch.encoder;
        b.conv("enc.c0", e0, arch.image_channels, 3, Init::He);
        b.conv("enc.c1", e1, e0, 3, Init::He);
        b.conv("enc.c2", e1, e1, 3, Init::He);
        b.conv("enc.out", LATENT_CHANNELS, e1, 1, Init::He);

        b.conv("dec.in", arch.bottleneck, LATENT_CHANNELS, 3, Init::He);
        for i in 0..ORIGINAL_MID_BLOCKS {
            b.mid(&format!("dec.mid.{i}"), arch.bottleneck, Init::He);
        }
        for s in 0..UP_STAGES {
            let c = arch.stage_channels(s);
            b.conv(&format!("dec.up{s}"), c, c, 3, Init::He);
        }
        b.conv("dec.reduce", arch.hidden, arch.bottleneck, 1, Init::He);
        b.conv("dec.out", arch.image_channels, arch.hidden, 3, Init::He);
        Ok(ReferenceAutoencoder { arch, params: b.store })
    }

    /// Rebuilds from stored parameters, checking every expected tensor is present.
    pub fn from_params(arch: ArchConfig, params: ParamStore<f32>) -> Result<Self> {
        let template = ReferenceAutoencoder::build(arch, 0)?;
        check_same_layout(&template.params, &params)?;
        Ok(ReferenceAutoencoder { arch, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<f32> {
        self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|(_, p)| p.frozen)
    }

    pub fn encoder_blocks(&self) -> Vec<Block> {
        let c = |name: &str, stride, padding, act| Block::Conv { name: name.into(), stride, padding, act };
        vec![
            c("enc.c0", 2, 1, Activation::Relu),
            c("enc.c1", 2, 1, Activation::Relu),
            c("enc.c2", 1, 1, Activation::Relu),
            c("enc.out", 1, 0, Activation::Identity),
        ]
    }

    pub fn decoder_blocks(&self) -> Vec<Block> {
        let plain = StructureConfig { fusers: vec![], ..Default::default() };
        decoder_layout(&self.arch, &plain, &RemovalHypothesis::KEEP_ALL)
    }

    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.arch.image_channels || !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) || s[2] == 0 {
            return Err(Error::Decode(format!(
                "expected N×{}×H×W images with H, W multiples of 8, got {s:?}",
                self.arch.image_channels
            )));
        }
        infer(&self.params, &self.encoder_blocks(), images, None)
    }

    pub fn decode(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_latents(&self.arch, latents)?;
        infer(&self.params, &self.decoder_blocks(), latents, None)
    }

    pub fn reconstruct(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.decode(&self.encode(images)?)
    }
}

fn check_same_layout(expected: &ParamStore<f32>, actual: &ParamStore<f32>) -> Result<()> {
    for (name, p) in expected.iter() {
        match actual.get(name) {
            None => return Err(Error::Format(format!("missing parameter `{name}`"))),
            Some(q) if q.tensor.shape() != p.tensor.shape() => {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    q.tensor.shape(),
                    p.tensor.shape()
                )))
            }
            _ => {}
        }
    }
    if actual.len() != expected.len() {
        let extra: Vec<&str> = actual.names().filter(|n| !expected.contains(n)).collect();
        return Err(Error::Format(format!("unexpected parameters {extra:?}")));
    }
    Ok(())
}

/// Decoder block sequence for a structure with some layers possibly removed.
fn decoder_layout(arch: &ArchConfig, structure: &StructureConfig, removal: &RemovalHypothesis) -> Vec<Block> {
    let mut blocks = vec![Block::Conv { name: "dec.in".into(), stride: 2, padding: 1, act: Activation::Relu }];
    let fuser = |slot: FuserSlot| Block::Fuser { name: slot.param_prefix().into(), channels: slot_channels(arch, slot) };
    if structure.fusers.contains(&FuserSlot::Input) {
        blocks.push(fuser(FuserSlot::Input));
    }
    for (k, name) in structure.mid_chain().into_iter().enumerate() {
        if removal.mid_survivors.is_none_or(|(i, j)| k == i || k == j) {
            blocks.push(Block::Mid { name });
        }
    }
    blocks.push(Block::Relu);
    for s in 0..UP_STAGES {
        let n = structure.pairs();
        let up_name = |j: usize| if j == n { format!("dec.up{s}") } else { format!("ft.up{s}.{j}.up") };
        match removal.up_survivors {
            Some(keep) => blocks.push(Block::Up { name: up_name(keep[s]) }),
            None => {
                for j in 0..n {
                    blocks.push(Block::Up { name: up_name(j) });
                    blocks.push(Block::Down { name: format!("ft.up{s}.{j}.down") });
                }
                blocks.push(Block::Up { name: up_name(n) });
            }
        }
        if s == 0 {
            blocks.push(Block::Conv { name: "dec.reduce".into(), stride: 1, padding: 0, act: Activation::Relu });
        }
    }
    if structure.fusers.contains(&FuserSlot::BeforeOutput) {
        blocks.push(fuser(FuserSlot::BeforeOutput));
    }
    blocks.push(Block::Conv { name: "dec.out".into(), stride: 1, padding: 1, act: Activation::Sigmoid });
    blocks
}

/// How a decode was gated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    /// A key was supplied to the fusers. Whether it is the registered key is not checked here.
    Keyed,
    /// Fusers were bypassed; the output is unauthorized.
    Unauthorized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub images: Tensor<f32>,
    pub mode: AccessMode,
}

impl Decoded {
    pub fn is_unauthorized(&self) -> bool {
        self.mode == AccessMode::Unauthorized
    }
}

/// Kind and tensor geometry of one layer, as visible from its parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSignature {
    pub kind: String,
    /// `[out, in, kh, kw]` of each convolution in the layer.
    pub convs: Vec<[usize; 4]>,
    pub stride: usize,
}

/// Decoder carrying the frozen reference layers, fuser layers and
/// fine-tuning layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedDecoder {
    arch: ArchConfig,
    structure: StructureConfig,
    params: ParamStore<f32>,
}

impl GatedDecoder {
    /// Copies the reference decoder as frozen parameters and adds fresh
    /// trainable layers initialized near the identity map.
    pub fn build(reference: &ReferenceAutoencoder, structure: StructureConfig, seed: u64) -> Result<Self> {
        structure.validate()?;
        if !reference.is_frozen() {
            return Err(Error::config("reference autoencoder must be frozen before adding gated layers"));
        }
        let arch = reference.arch;
        let mut b = Builder::new(seed);
        for (name, p) in reference.params.iter().filter(|(n, _)| n.starts_with("dec.")) {
            b.store.insert(name, p.tensor.clone(), true);
        }
        for j in 0..structure.mids() {
            b.mid(&format!("ft.mid.{j}"), arch.bottleneck, Init::Small);
        }
        for s in 0..UP_STAGES {
            let c = arch.stage_channels(s);
            for j in 0..structure.pairs() {
                b.conv(&format!("ft.up{s}.{j}.up"), c, c, 3, Init::NearIdentity);
                b.conv(&format!("ft.up{s}.{j}.down"), c, c, 3, Init::NearIdentity);
            }
        }
        for &slot in &structure.fusers {
            b.fuser(slot.param_prefix(), slot_channels(&arch, slot));
        }
        Ok(GatedDecoder { arch, structure, params: b.store })
    }

    pub fn from_params(arch: ArchConfig, structure: StructureConfig, params: ParamStore<f32>) -> Result<Self> {
        structure.validate()?;
        let reference = ReferenceAutoencoder::build(arch, 0)?;
        let mut frozen = reference;
        frozen.freeze();
        let template = GatedDecoder::build(&frozen, structure.clone(), 0)?;
        check_same_layout(&template.params, &params)?;
        Ok(GatedDecoder { arch, structure, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn structure(&self) -> &StructureConfig {
        &self.structure
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn has_fusers(&self) -> bool {
        !self.structure.fusers.is_empty()
    }

    pub fn blocks(&self, removal: &RemovalHypothesis) -> Result<Vec<Block>> {
        self.structure.check_hypothesis(removal)?;
        Ok(decoder_layout(&self.arch, &self.structure, removal))
    }

    /// Decodes with the given key, or with fusers bypassed when `key` is `None`.
    pub fn decode(&self, latents: &Tensor<f32>, key: Option<&FuserKey>) -> Result<Decoded> {
        self.decode_with(latents, key, &RemovalHypothesis::KEEP_ALL)
    }

    pub fn decode_with(&self, latents: &Tensor<f32>, key: Option<&FuserKey>, removal: &RemovalHypothesis) -> Result<Decoded> {
        check_latents(&self.arch, latents)?;
        let images = infer(&self.params, &self.blocks(removal)?, latents, key)?;
        let mode = if key.is_none() && self.has_fusers() { AccessMode::Unauthorized } else { AccessMode::Keyed };
        Ok(Decoded { images, mode })
    }

    /// Decode through the frozen reference layers alone, skipping every added layer.
    pub fn decode_reference(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_latents(&self.arch, latents)?;
        let plain = StructureConfig { fusers: vec![], ..Default::default() };
        infer(&self.params, &decoder_layout(&self.arch, &plain, &RemovalHypothesis::KEEP_ALL), latents, None)
    }

    /// Copy of this decoder with every fuser layer removed.
    pub fn without_fusers(&self) -> GatedDecoder {
        let mut params = ParamStore::new();
        for (name, p) in self.params.iter().filter(|(n, _)| !n.starts_with("fuser.")) {
            params.insert(name, p.tensor.clone(), p.frozen);
        }
        let structure = StructureConfig { fusers: vec![], ..self.structure.clone() };
        GatedDecoder { arch: self.arch, structure, params }
    }

    /// Signature of every mid block and up/down layer, in chain order.
    pub fn layer_signatures(&self) -> Result<Vec<(String, LayerSignature)>> {
        let shape = |name: String| -> Result<[usize; 4]> {
            let s = self.params.tensor(&format!("{name}.w"))?.shape();
            Ok([s[0], s[1], s[2], s[3]])
        };
        let mut out = Vec::new();
        for block in self.blocks(&RemovalHypothesis::KEEP_ALL)? {
            let sig = match &block {
                Block::Mid { name } => LayerSignature {
                    kind: "mid".into(),
                    convs: vec![shape(format!("{name}.conv1"))?, shape(format!("{name}.conv2"))?],
                    stride: 1,
                },
                Block::Up { name } => LayerSignature { kind: "up".into(), convs: vec![shape(name.clone())?], stride: 1 },
                Block::Down { name } => LayerSignature { kind: "down".into(), convs: vec![shape(name.clone())?], stride: 2 },
                _ => continue,
            };
            out.push((block.name().unwrap_or_default().to_string(), sig));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keying::generate_key;

    fn frozen_reference(seed: u64) -> ReferenceAutoencoder {
        let mut r = ReferenceAutoencoder::build(ArchConfig::default(), seed).unwrap();
        r.freeze();
        r
    }

    fn latents(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        Tensor::from_fn(&[n, 4, 8, 8], |_| normal.sample(&mut rng))
    }

    #[test]
    fn reference_is_seed_deterministic() {
        let a = ReferenceAutoencoder::build(ArchConfig::default(), 5).unwrap();
        let b = ReferenceAutoencoder::build(ArchConfig::default(), 5).unwrap();
        assert!(a.params().iter().zip(b.params().iter()).all(|((_, p), (_, q))| p.tensor.bit_eq(&q.tensor)));
        assert_ne!(a, ReferenceAutoencoder::build(ArchConfig::default(), 6).unwrap());
    }

    #[test]
    fn reference_shapes() {
        let r = frozen_reference(1);
        let x = Tensor::full(&[2, 3, 32, 32], 0.5f32);
        let z = r.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 8, 8]);
        assert_eq!(r.decode(&z).unwrap().shape(), x.shape());
        let mids = r.decoder_blocks().iter().filter(|b| matches!(b, Block::Mid { .. })).count();
        assert_eq!(mids, 2);
    }

    #[test]
    fn labels_map_to_added_counts() {
        let s = StructureConfig::from_label("8-6").unwrap();
        assert_eq!((s.m, s.n, s.label.as_deref()), (6, 5, Some("8-6")));
        assert_eq!((StructureConfig::from_label("20-4").unwrap().m, StructureConfig::from_label("20-4").unwrap().n), (18, 3));
        let s = StructureConfig::from_label("208").unwrap();
        assert_eq!((s.m, s.n), (18, 7));
        assert!(StructureConfig::from_label("x").is_err());
        assert!(StructureConfig::from_label("1-1").is_err());
    }

    #[test]
    fn negative_counts_rejected() {
        assert!(StructureConfig::new(-1, 0).is_err());
        assert!(StructureConfig::new(0, -1).is_err());
    }

    #[test]
    fn build_requires_frozen_reference() {
        let r = ReferenceAutoencoder::build(ArchConfig::default(), 1).unwrap();
        assert!(GatedDecoder::build(&r, StructureConfig::default(), 0).is_err());
    }

    #[test]
    fn identity_structure_matches_reference_exactly() {
        let r = frozen_reference(2);
        let d = GatedDecoder::build(&r, StructureConfig::default(), 3).unwrap();
        let z = latents(3, 4);
        let reference = r.decode(&z).unwrap();
        let keyed = d.decode(&z, Some(&generate_key(1))).unwrap();
        assert_eq!(keyed.mode, AccessMode::Keyed);
        assert!(keyed.images.bit_eq(&reference));
        let bypass = d.decode(&z, None).unwrap();
        assert!(bypass.is_unauthorized());
        assert!(bypass.images.bit_eq(&reference));
    }

    #[test]
    fn added_layers_start_near_identity() {
        let r = frozen_reference(2);
        let d = GatedDecoder::build(&r, StructureConfig::new(2, 1).unwrap(), 3).unwrap();
        let z = latents(2, 5);
        let a = r.decode(&z).unwrap();
        let b = d.decode(&z, Some(&generate_key(1))).unwrap().images;
        let max = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(max < 0.01, "max deviation {max}");
    }

    #[test]
    fn output_shape_for_all_small_structures() {
        let r = frozen_reference(3);
        let z = latents(1, 6);
        for m in 0..=6 {
            for n in 0..=6 {
                let d = GatedDecoder::build(&r, StructureConfig::new(m, n).unwrap(), 0).unwrap();
                assert_eq!(d.decode(&z, Some(&generate_key(0))).unwrap().images.shape(), &[1, 3, 32, 32]);
            }
        }
    }

    #[test]
    fn parameter_audit() {
        let r = frozen_reference(4);
        let small = GatedDecoder::build(&r, StructureConfig::new(0, 0).unwrap(), 0).unwrap();
        let big = GatedDecoder::build(&r, StructureConfig::from_label("8-6").unwrap(), 0).unwrap();
        assert!(big.params().numel() > small.params().numel());
        assert_eq!(big.structure().label.as_deref(), Some("8-6"));
        for (name, p) in big.params().iter().filter(|(_, p)| p.frozen) {
            assert!(p.tensor.bit_eq(r.params().tensor(name).unwrap()), "{name}");
        }
        let frozen = big.params().iter().filter(|(_, p)| p.frozen).count();
        assert_eq!(frozen, r.params().iter().filter(|(n, _)| n.starts_with("dec.")).count());
    }

    #[test]
    fn added_layers_share_signatures_with_originals() {
        let r = frozen_reference(4);
        let d = GatedDecoder::build(&r, StructureConfig::new(3, 2).unwrap(), 0).unwrap();
        let sigs = d.layer_signatures().unwrap();
        let of = |name: &str| sigs.iter().find(|(n, _)| n == name).unwrap().1.clone();
        for j in 0..3 {
            assert_eq!(of(&format!("ft.mid.{j}")), of("dec.mid.0"));
        }
        for s in 0..3 {
            for j in 0..2 {
                assert_eq!(of(&format!("ft.up{s}.{j}.up")), of(&format!("dec.up{s}")));
            }
        }
        assert_eq!(sigs.iter().filter(|(_, s)| s.kind == "mid").count(), 5);
        assert_eq!(sigs.iter().filter(|(_, s)| s.kind == "down").count(), 6);
    }

    #[test]
    fn mid_chain_places_originals_centrally() {
        let s = StructureConfig::new(3, 0).unwrap();
        assert_eq!(s.mid_chain(), ["ft.mid.0", "ft.mid.1", "dec.mid.0", "dec.mid.1", "ft.mid.2"]);
        assert_eq!(s.original_mid_indices(), (2, 3));
    }

    #[test]
    fn removal_keep_all_equals_plain_decode() {
        let r = frozen_reference(5);
        let d = GatedDecoder::build(&r, StructureConfig::new(2, 1).unwrap(), 1).unwrap();
        let z = latents(2, 7);
        let k = generate_key(3);
        let a = d.decode(&z, Some(&k)).unwrap().images;
        let b = d.decode_with(&z, Some(&k), &RemovalHypothesis::KEEP_ALL).unwrap().images;
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn invalid_hypotheses_rejected() {
        let r = frozen_reference(5);
        let d = GatedDecoder::build(&r, StructureConfig::new(1, 0).unwrap(), 1).unwrap();
        let z = latents(1, 7);
        assert!(d.decode_with(&z, None, &RemovalHypothesis::mids(0, 3)).is_err());
        assert!(d.decode_with(&z, None, &RemovalHypothesis::ups([0, 1, 0])).is_err());
        assert!(d.decode_with(&z, None, &RemovalHypothesis::mids(1, 2)).is_ok());
    }

    #[test]
    fn stripped_fusers_match_bypass() {
        let r = frozen_reference(6);
        let d = GatedDecoder::build(&r, StructureConfig::new(1, 1).unwrap(), 2).unwrap();
        let z = latents(1, 8);
        let stripped = d.without_fusers();
        assert!(stripped.params().names().all(|n| !n.starts_with("fuser.")));
        let a = stripped.decode(&z, None).unwrap();
        assert_eq!(a.mode, AccessMode::Keyed);
        assert!(a.images.bit_eq(&d.decode(&z, None).unwrap().images));
    }

    #[test]
    fn from_params_checks_layout() {
        let r = frozen_reference(7);
        let d = GatedDecoder::build(&r, StructureConfig::new(1, 1).unwrap(), 2).unwrap();
        let back = GatedDecoder::from_params(*d.arch(), d.structure().clone(), d.params().clone()).unwrap();
        assert_eq!(back, d);
        assert!(GatedDecoder::from_params(*d.arch(), StructureConfig::new(2, 1).unwrap(), d.params().clone()).is_err());
    }
}
