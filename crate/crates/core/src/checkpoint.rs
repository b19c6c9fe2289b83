//! Checkpoint container: model config plus named parameter tensors.
//!
//! Layout (little-endian): `"SSRC"`, u32 version, u32 config length, config
//! JSON, u32 tensor count, then per tensor: u32 name length, name bytes,
//! u32 ndims, u32 dims, f64 payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::model::{SsrConfig, SsrModel, StageMask};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSRC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Prefixes of the parameters the shadow (inference) path uses.
pub const SHADOW_PREFIXES: [&str; 2] = ["backbone.", "decoder."];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: SsrConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of `store`. With `shadow_only`, training-only modules are
    /// dropped and the stored stage mask becomes empty, so the artifact
    /// rebuilds as a plain backbone + decoder.
    pub fn from_store(config: &SsrConfig, store: &ParamStore, shadow_only: bool) -> Self {
        let mut config = config.clone();
        if shadow_only {
            config.stage_mask = StageMask::EMPTY;
        }
        let tensors = store
            .iter()
            .filter(|(_, p)| !shadow_only || SHADOW_PREFIXES.iter().any(|s| p.name.starts_with(s)))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Self { config, tensors }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_len(&mut out, json.len())?;
        out.extend_from_slice(&json);
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_len(&mut out, d)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion { expected: CHECKPOINT_VERSION, found: version });
        }
        let json_len = r.u32()? as usize;
        let config: SsrConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| FormatError::Malformed(format!("config record: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::Malformed(format!("{name}: dims {dims:?} overflow")))?;
            let payload = r.take(numel.checked_mul(8).ok_or_else(|| FormatError::Malformed(format!("{name}: payload overflow")))?)?;
            let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(dims, data).map_err(|e| FormatError::Malformed(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes { extra: bytes.len() - r.pos });
        }
        Ok(Self { config, tensors })
    }

    /// Rebuilds the model and loads every tensor into it by name. The stored
    /// names must match the model's parameters exactly, with equal shapes.
    pub fn into_model(self) -> Result<(SsrModel, ParamStore)> {
        self.config.validate()?;
        let (model, mut store) = SsrModel::new(self.config, 0)?;
        if self.tensors.len() != store.len() {
            return Err(FormatError::Malformed(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            ))
            .into());
        }
        for (name, t) in self.tensors {
            let p = store
                .by_name_mut(&name)
                .ok_or_else(|| FormatError::Malformed(format!("unknown parameter {name:?}")))?;
            if p.value.shape() != t.shape() {
                return Err(FormatError::Malformed(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                ))
                .into());
            }
            p.value = t;
        }
        Ok((model, store))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::decode(&bytes)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::shape(format!("length {v} exceeds u32")))?;
    put_u32(out, v);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
