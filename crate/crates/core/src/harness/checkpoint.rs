//! Binary checkpoint container. Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "M3ETCKPT"
//! version      u32       1
//! header_len   u32       byte length of the header
//! header       UTF-8 TOML: step, precision, [config], [[tensor]] directory
//! payload      tensors back to back, each `len` bytes at `offset` from payload start
//! checksum     32 bytes  SHA-256 of everything above
//! ```
//!
//! Directory entries carry `name`, `group` (`param`, `adam_m`, `adam_v`), `shape`,
//! `offset` and `len`. Offsets must be contiguous in directory order.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Precision, Real, Tensor};

use super::config::RunConfig;
use super::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"M3ETCKPT";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;
const PREFIX_LEN: usize = 16;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    precision: Precision,
    #[serde(default)]
    adam_step: u64,
    config: RunConfig,
    #[serde(default, rename = "tensor")]
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    /// Little-endian values at the checkpoint precision.
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed optimisation steps.
    pub step: u64,
    pub precision: Precision,
    pub adam_step: u64,
    pub tensors: Vec<NamedTensor>,
}

fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * T::PRECISION.bytes());
    for &v in t.data() {
        v.put_le(&mut out);
    }
    out
}

fn decode<T: Real>(shape: &[usize], bytes: &[u8]) -> Result<Tensor<T>> {
    let w = T::PRECISION.bytes();
    Tensor::new(shape.to_vec(), bytes.chunks_exact(w).map(T::get_le).collect())
}

impl Checkpoint {
    /// Snapshot parameters and, when given, optimiser moments.
    pub fn capture<T: Real>(config: &RunConfig, step: u64, store: &ParamStore<T>, adam: Option<&AdamState<T>>) -> Self {
        let mut tensors = Vec::new();
        let mut push = |name: &str, group, t: &Tensor<T>| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                group,
                shape: t.shape().to_vec(),
                bytes: encode(t),
            })
        };
        for (_, name, t) in store.iter() {
            push(name, Group::Param, t);
        }
        if let Some(a) = adam {
            for (id, name, _) in store.iter() {
                push(name, Group::AdamM, &a.m[id.index()]);
            }
            for (id, name, _) in store.iter() {
                push(name, Group::AdamV, &a.v[id.index()]);
            }
        }
        Self {
            config: config.clone(),
            step,
            precision: T::PRECISION,
            adam_step: adam.map_or(0, |a| a.step),
            tensors,
        }
    }

    /// Copy parameters (and moments if present) into a store built from the same config.
    pub fn restore<T: Real>(&self, store: &mut ParamStore<T>) -> Result<Option<AdamState<T>>> {
        if self.precision != T::PRECISION {
            return Err(Error::Checkpoint(format!(
                "saved at {:?}, restoring at {:?}",
                self.precision,
                T::PRECISION
            )));
        }
        let mut adam = AdamState::new(store);
        adam.step = self.adam_step;
        let mut seen: [Vec<bool>; 3] = std::array::from_fn(|_| vec![false; store.len()]);
        for t in &self.tensors {
            let id = store
                .id(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", t.name)))?;
            let value = decode::<T>(&t.shape, &t.bytes)?;
            if value.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    t.name,
                    value.shape(),
                    store.get(id).shape()
                )));
            }
            let g = t.group as usize;
            if std::mem::replace(&mut seen[g][id.index()], true) {
                return Err(Error::Checkpoint(format!("`{}` appears twice", t.name)));
            }
            match t.group {
                Group::Param => store.set(id, value)?,
                Group::AdamM => adam.m[id.index()] = value,
                Group::AdamV => adam.v[id.index()] = value,
            }
        }
        if let Some(i) = seen[0].iter().position(|s| !s) {
            let name = store.iter().nth(i).map(|(_, n, _)| n).unwrap_or_default();
            return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
        }
        let has_m = seen[1].iter().any(|&s| s);
        let has_v = seen[2].iter().any(|&s| s);
        if !has_m && !has_v {
            return Ok(None);
        }
        if !(seen[1].iter().all(|&s| s) && seen[2].iter().all(|&s| s)) {
            return Err(Error::Checkpoint("optimiser state is incomplete".into()));
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let len = t.bytes.len() as u64;
            entries.push(Entry {
                name: t.name.clone(),
                group: t.group,
                shape: t.shape.clone(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            step: self.step,
            precision: self.precision,
            adam_step: self.adam_step,
            config: self.config.clone(),
            tensors: entries,
        };
        let text = toml::to_string(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let header_len = u32::try_from(text.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + text.len() + offset as usize + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < PREFIX_LEN + CHECKSUM_LEN {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch"));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header runs past end of file"))?;
        let text = std::str::from_utf8(&body[PREFIX_LEN..header_end]).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.config.validate()?;
        let payload = &body[header_end..];
        let width = header.precision.bytes() as u64;
        let mut cursor = 0u64;
        let mut names = HashSet::new();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.shape.len() > MAX_RANK {
                return Err(Error::Checkpoint(format!("`{}` has rank {}", e.name, e.shape.len())));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| bad("shape overflows"))?;
            if numel.checked_mul(width) != Some(e.len) {
                return Err(Error::Checkpoint(format!("`{}` length does not match its shape", e.name)));
            }
            if e.offset != cursor {
                return Err(Error::Checkpoint(format!("`{}` is not contiguous", e.name)));
            }
            let end = cursor
                .checked_add(e.len)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| Error::Checkpoint(format!("`{}` runs past the payload", e.name)))?;
            if !names.insert((e.name.clone(), e.group)) {
                return Err(Error::Checkpoint(format!("`{}` appears twice", e.name)));
            }
            tensors.push(NamedTensor {
                name: e.name,
                group: e.group,
                shape: e.shape,
                bytes: payload[cursor as usize..end as usize].to_vec(),
            });
            cursor = end;
        }
        if cursor != payload.len() as u64 {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            precision: header.precision,
            adam_step: header.adam_step,
            tensors,
        })
    }

    /// Write atomically: to a sibling temp file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(3);
        s.add_weight("a.weight", &[3, 2], &mut rng).unwrap();
        s.add_full("a.bias", &[2], 0.5).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let s = store();
        let mut adam = AdamState::new(&s);
        adam.step = 7;
        adam.m[0].data_mut()[1] = -1.25;
        let c = Checkpoint::capture(&RunConfig::desk(), 12, &s, Some(&adam));
        let b = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b);

        let mut fresh = ParamStore::<f32>::new();
        fresh.add_zeros("a.weight", &[3, 2]).unwrap();
        fresh.add_zeros("a.bias", &[2]).unwrap();
        let a2 = back.restore(&mut fresh).unwrap().unwrap();
        assert_eq!(a2, adam);
        for ((_, _, x), (_, _, y)) in fresh.iter().zip(s.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn corruption_detected() {
        let c = Checkpoint::capture(&RunConfig::desk(), 1, &store(), None);
        let b = c.to_bytes().unwrap();
        for i in [0, 9, 20, b.len() - 40, b.len() - 1] {
            let mut x = b.clone();
            x[i] ^= 0x10;
            assert!(Checkpoint::from_bytes(&x).is_err(), "flip at {i}");
        }
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn restore_validates_names_and_shapes() {
        let c = Checkpoint::capture(&RunConfig::desk(), 1, &store(), None);
        let mut other = ParamStore::<f32>::new();
        other.add_zeros("a.weight", &[3, 2]).unwrap();
        other.add_zeros("a.bias", &[2]).unwrap();
        other.add_zeros("extra", &[1]).unwrap();
        assert!(c.restore(&mut other).unwrap_err().to_string().contains("extra"));
        let mut wrong = ParamStore::<f32>::new();
        wrong.add_zeros("a.weight", &[2, 3]).unwrap();
        wrong.add_zeros("a.bias", &[2]).unwrap();
        assert!(c.restore(&mut wrong).is_err());
        let mut f64s = ParamStore::<f64>::new();
        f64s.add_zeros("a.weight", &[3, 2]).unwrap();
        f64s.add_zeros("a.bias", &[2]).unwrap();
        assert!(c.restore(&mut f64s).is_err());
    }
}
