//! Fuser keys and the structural brute-force search space.
//!
//! An attacker who wants to strip the inserted fine-tuning layers has to
//! guess which two mid blocks are the originals (`C(m+2, 2)` choices), or
//! which up layer in each of the three upsampling stages is the original
//! (`(n+1)^3` choices). The two hypothesis families are enumerated
//! separately, so the space has `C(m+2, 2) + (n+1)^3` members.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const KEY_BITS: usize = 128;
pub const KEY_HEX_LEN: usize = KEY_BITS / 4;
/// Mid blocks in the unmodified decoder.
pub const ORIGINAL_MID_BLOCKS: usize = 2;
/// Upsampling stages in the decoder.
pub const UP_STAGES: usize = 3;
/// Largest `m` or `n` accepted by [`enumerate_removals`].
pub const MAX_ENUMERATION: i64 = 20;

/// 128-bit credential. Bit 0 is the most significant bit of the first hex digit.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct FuserKey([u8; KEY_BITS / 8]);

impl FuserKey {
    pub fn from_bytes(bytes: [u8; KEY_BITS / 8]) -> Self {
        FuserKey(bytes)
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        if bits.len() != KEY_BITS {
            return Err(Error::Key(format!("expected {KEY_BITS} bits, got {}", bits.len())));
        }
        let mut bytes = [0u8; KEY_BITS / 8];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        Ok(FuserKey(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_BITS / 8] {
        &self.0
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..KEY_BITS).map(|i| self.bit(i)).collect()
    }

    /// `+1` for set bits, `-1` for clear bits.
    pub fn bipolar(&self) -> Vec<f64> {
        (0..KEY_BITS).map(|i| if self.bit(i) { 1.0 } else { -1.0 }).collect()
    }

    pub fn with_flipped(&self, i: usize) -> Self {
        let mut k = *self;
        k.0[i / 8] ^= 0x80 >> (i % 8);
        k
    }

    pub fn hamming(&self, other: &FuserKey) -> u32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Salted SHA-256 fingerprint, `sha256:<salt>:<digest>`.
    pub fn fingerprint(&self, salt: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(salt);
        h.update(self.0);
        format!("sha256:{}:{}", hex::encode(salt), hex::encode(h.finalize()))
    }

    pub fn matches_fingerprint(&self, fingerprint: &str) -> bool {
        let mut parts = fingerprint.splitn(3, ':');
        match (parts.next(), parts.next().and_then(|s| hex::decode(s).ok())) {
            (Some("sha256"), Some(salt)) => self.fingerprint(&salt) == fingerprint,
            _ => false,
        }
    }
}

// The key is the protected credential; keep it out of debug output.
impl fmt::Debug for FuserKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FuserKey(<redacted>)")
    }
}

impl FromStr for FuserKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_key(s)
    }
}

pub fn generate_key(seed: u64) -> FuserKey {
    let mut bytes = [0u8; KEY_BITS / 8];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut bytes);
    FuserKey(bytes)
}

/// Parses 32 hex characters (either case).
pub fn parse_key(hex_str: &str) -> Result<FuserKey> {
    if hex_str.len() != KEY_HEX_LEN {
        return Err(Error::Key(format!(
            "expected {KEY_HEX_LEN} hex characters ({KEY_BITS} bits), got {}",
            hex_str.len()
        )));
    }
    let mut bytes = [0u8; KEY_BITS / 8];
    hex::decode_to_slice(hex_str, &mut bytes).map_err(|e| Error::Key(format!("invalid hex: {e}")))?;
    Ok(FuserKey(bytes))
}

/// Uniform random key guaranteed to differ from `correct` in at least one bit.
pub fn random_wrong_key(correct: &FuserKey, rng: &mut impl Rng) -> FuserKey {
    loop {
        let mut bytes = [0u8; KEY_BITS / 8];
        rng.fill_bytes(&mut bytes);
        let k = FuserKey(bytes);
        if k != *correct {
            return k;
        }
    }
}

fn check_counts(m: i64, n: i64) -> Result<(u64, u64)> {
    if m < 0 || n < 0 {
        return Err(Error::config(format!("layer counts must be non-negative, got m={m}, n={n}")));
    }
    Ok((m as u64, n as u64))
}

/// `C(m+2, 2) + (n+1)^3`.
pub fn combination_count(m: i64, n: i64) -> Result<u64> {
    let (m, n) = check_counts(m, n)?;
    let mids = (m + 2)
        .checked_mul(m + 1)
        .map(|v| v / 2)
        .ok_or_else(|| Error::Resource("mid block count overflows".into()))?;
    let ups = (n + 1)
        .checked_pow(UP_STAGES as u32)
        .ok_or_else(|| Error::Resource("up layer count overflows".into()))?;
    mids.checked_add(ups).ok_or_else(|| Error::Resource("combination count overflows".into()))
}

/// One guess about which layers of a keyed decoder are original.
///
/// `None` in either field keeps every layer of that kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RemovalHypothesis {
    /// Indices into the mid-block chain of the two blocks that survive.
    pub mid_survivors: Option<(usize, usize)>,
    /// Per upsampling stage, index of the single up layer that survives.
    pub up_survivors: Option<[usize; UP_STAGES]>,
}

impl RemovalHypothesis {
    pub const KEEP_ALL: RemovalHypothesis = RemovalHypothesis { mid_survivors: None, up_survivors: None };

    pub fn mids(i: usize, j: usize) -> Self {
        RemovalHypothesis { mid_survivors: Some((i.min(j), i.max(j))), up_survivors: None }
    }

    pub fn ups(stages: [usize; UP_STAGES]) -> Self {
        RemovalHypothesis { mid_survivors: None, up_survivors: Some(stages) }
    }

    pub fn keeps_everything(&self) -> bool {
        self.mid_survivors.is_none() && self.up_survivors.is_none()
    }
}

impl fmt::Display for RemovalHypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mid_survivors {
            Some((i, j)) => write!(f, "mids[{i},{j}]")?,
            None => write!(f, "mids[*]")?,
        }
        match self.up_survivors {
            Some([a, b, c]) => write!(f, " ups[{a},{b},{c}]"),
            None => write!(f, " ups[*]"),
        }
    }
}

/// Every hypothesis counted by [`combination_count`], mid pairs first.
pub fn enumerate_removals(m: i64, n: i64) -> Result<Vec<RemovalHypothesis>> {
    let (mu, nu) = check_counts(m, n)?;
    if m > MAX_ENUMERATION || n > MAX_ENUMERATION {
        return Err(Error::Resource(format!(
            "enumeration limited to m, n <= {MAX_ENUMERATION}, got m={m}, n={n}"
        )));
    }
    let (mids, per_stage) = (mu as usize + ORIGINAL_MID_BLOCKS, nu as usize + 1);
    let mut out = Vec::new();
    for i in 0..mids {
        for j in i + 1..mids {
            out.push(RemovalHypothesis::mids(i, j));
        }
    }
    for a in 0..per_stage {
        for b in 0..per_stage {
            for c in 0..per_stage {
                out.push(RemovalHypothesis::ups([a, b, c]));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrackEstimate {
    pub m: u64,
    pub n: u64,
    pub combination_count: u64,
    pub t_test: f64,
    pub t_crack: f64,
}

/// Exhaustive structural search time, `t_test × combination_count(m, n)`.
pub fn crack_time(m: i64, n: i64, t_test: f64) -> Result<CrackEstimate> {
    if !(t_test > 0.0 && t_test.is_finite()) {
        return Err(Error::config(format!("t_test must be positive, got {t_test}")));
    }
    let count = combination_count(m, n)?;
    Ok(CrackEstimate { m: m as u64, n: n as u64, combination_count: count, t_test, t_crack: t_test * count as f64 })
}
