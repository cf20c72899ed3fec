//! Binary checkpoint container: named tensors with frozen flags followed by
//! JSON metadata.
//!
//! ```text
//! "PCDF1\n" | version u32 | count u32
//! per tensor: name_len u32 | name | rank u32 | dims u64* | dtype u8 | frozen u8 | payload
//! metadata JSON (rest of file)
//! ```
//! All integers and payloads are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use keygate_tensor::{DType, ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"PCDF1\n";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            TensorData::F32(t) => t.clone(),
            TensorData::F64(t) => t.cast(),
        }
    }

    fn bit_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => a.bit_eq(b),
            (TensorData::F64(a), TensorData::F64(b)) => a.bit_eq(b),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub data: TensorData,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_params(params: &ParamStore<f32>, metadata: serde_json::Value) -> Self {
        let tensors = params
            .iter()
            .map(|(n, p)| (n.to_string(), StoredTensor { data: TensorData::F32(p.tensor.clone()), frozen: p.frozen }))
            .collect();
        Checkpoint { tensors, metadata }
    }

    pub fn to_params(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (n, t) in &self.tensors {
            store.insert(n.clone(), t.data.to_f32(), t.frozen);
        }
        store
    }

    /// Tensor-wise bitwise equality plus equal metadata.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| {
                na == nb && a.frozen == b.frozen && a.data.bit_eq(&b.data)
            })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = t.data.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(x) => {
                    out.push(DType::F32.tag());
                    out.push(t.frozen as u8);
                    x.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                TensorData::F64(x) => {
                    out.push(DType::F64.tag());
                    out.push(t.frozen as u8);
                    x.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        out.extend_from_slice(serde_json::to_string(&self.metadata)?.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 6];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic: expected {:?}, found {:?}", MAGIC, String::from_utf8_lossy(&magic))));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(bad(format!("unsupported version: expected {VERSION}, found {version}")));
        }
        let count = read_u32(&mut r, "tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r, "name length")? as usize;
            let name = String::from_utf8(take(&mut r, len, "name")?.to_vec())
                .map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b, "dims")?;
                shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| bad("dimension overflow".into()))?);
            }
            let mut tag = [0u8; 2];
            read_exact(&mut r, &mut tag, "dtype and frozen flag")?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow".into()))?;
            let data = match DType::from_tag(tag[0]) {
                Some(DType::F32) => {
                    let raw = take(&mut r, numel.checked_mul(4).ok_or_else(|| bad("size overflow".into()))?, &name)?;
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    TensorData::F32(Tensor::new(shape, v)?)
                }
                Some(DType::F64) => {
                    let raw = take(&mut r, numel.checked_mul(8).ok_or_else(|| bad("size overflow".into()))?, &name)?;
                    let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    TensorData::F64(Tensor::new(shape, v)?)
                }
                None => return Err(bad(format!("unknown dtype tag {} for `{name}`", tag[0]))),
            };
            let frozen = match tag[1] {
                0 => false,
                1 => true,
                f => return Err(bad(format!("invalid frozen flag {f} for `{name}`"))),
            };
            tensors.insert(name, StoredTensor { data, frozen });
        }
        let mut rest = String::new();
        r.read_to_string(&mut rest).map_err(|_| bad("metadata is not UTF-8".into()))?;
        let metadata = if rest.trim().is_empty() { serde_json::Value::Null } else { serde_json::from_str(&rest)? };
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn bad(msg: String) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::InvalidData, msg))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| bad(format!("truncated checkpoint while reading {what}")))
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(bad(format!("truncated checkpoint while reading {what}")));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
