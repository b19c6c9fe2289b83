//! The frozen teacher and its single-scale feature map `G`.
//!
//! The built-in teacher is a small seeded encoder (16×16 patch embedding plus
//! mixing blocks) whose parameters are frozen from construction. Features from
//! any other frozen encoder can be supplied as SSRF files instead.
//!
//! SSRF layout (little-endian):
//!
//! ```text
//! magic    4 bytes  "SSRF"
//! version  u32      1
//! ndims    u32      3
//! dims     u32 × 3  C, h, w
//! payload  f32 × C·h·w, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{Error, FormatError, Result};
use crate::nn::{tokens_to_map, LayerNorm, Linear, MixingBlock};
use crate::params::ParamStore;
use crate::rng::sub_rng;
use crate::tensor::Tensor;

pub const TEACHER_STRIDE: usize = 16;
pub const SSRF_MAGIC: &[u8; 4] = b"SSRF";
pub const SSRF_VERSION: u32 = 1;
pub const FEATURE_EXTENSION: &str = "ssrf";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Builtin,
    File(PathBuf),
}

/// A teacher feature map `[C_s × h × w]`. Values are always representable in
/// `f32`, so the SSRF round trip is exact.
#[derive(Clone, Debug)]
pub struct TeacherFeature {
    tensor: Tensor,
    pub source: FeatureSource,
}

impl TeacherFeature {
    /// Wraps a `[C×h×w]` map, rounding every value to the nearest `f32`.
    pub fn new(tensor: Tensor, source: FeatureSource) -> Result<Self> {
        tensor.dims3()?;
        if !tensor.is_finite() {
            return Err(Error::Numeric("teacher feature contains NaN or infinity".into()));
        }
        let data = tensor.data().iter().map(|&v| v as f32 as f64).collect();
        let tensor = Tensor::new(tensor.shape().to_vec(), data)?;
        Ok(Self { tensor, source })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }
}

/// Frozen single-scale encoder standing in for a foundation-model image encoder.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    embed: Linear,
    norm: LayerNorm,
    blocks: Vec<MixingBlock>,
    store: ParamStore,
    pub channels: usize,
}

impl TeacherModel {
    pub fn new(channels: usize, blocks: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = sub_rng(seed, "init.teacher");
        let patch_dim = 3 * TEACHER_STRIDE * TEACHER_STRIDE;
        let embed = Linear::new(&mut store, "teacher.embed", patch_dim, channels, true, true, &mut rng)?;
        let norm = LayerNorm::new(&mut store, "teacher.norm", channels, true)?;
        let blocks = (0..blocks)
            .map(|i| MixingBlock::new(&mut store, &format!("teacher.block{i}"), channels, heads, 2, true, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embed, norm, blocks, store, channels })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable access for tamper tests. Nothing in training uses this.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// `G` of shape `[C_s × H/16 × W/16]`, computed on a gradient-free tape.
    pub fn forward(&self, image: &Tensor) -> Result<TeacherFeature> {
        let (_, h, w) = image.dims3()?;
        if h % TEACHER_STRIDE != 0 || w % TEACHER_STRIDE != 0 {
            return Err(Error::shape(format!(
                "teacher input {h}x{w} must be divisible by {TEACHER_STRIDE}"
            )));
        }
        let mut tape = Tape::no_grad();
        let img = tape.constant(image.clone());
        let tokens = tape.patchify(img, TEACHER_STRIDE)?;
        let mut x = self.embed.forward(&mut tape, &self.store, tokens)?;
        x = self.norm.forward(&mut tape, &self.store, x)?;
        for b in &self.blocks {
            x = b.forward(&mut tape, &self.store, x)?;
        }
        let g = tokens_to_map(&mut tape, x, h / TEACHER_STRIDE, w / TEACHER_STRIDE)?;
        TeacherFeature::new(tape.value(g).clone(), FeatureSource::Builtin)
    }
}

pub fn teacher_forward(image: &Tensor, model: &TeacherModel) -> Result<TeacherFeature> {
    model.forward(image)
}

/// True iff the teacher's current parameter checksum equals `checksum_before`.
pub fn assert_frozen(model: &TeacherModel, checksum_before: &str) -> bool {
    model.checksum() == checksum_before
}

pub fn encode_features(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    if !t.is_finite() {
        return Err(Error::Numeric("cannot save non-finite features".into()));
    }
    let mut out = Vec::with_capacity(24 + 4 * t.numel());
    out.extend_from_slice(SSRF_MAGIC);
    out.extend_from_slice(&SSRF_VERSION.to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in [c, h, w] {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, FormatError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(FormatError::Truncated { expected: at + 4, actual: bytes.len() })
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<Tensor, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { expected: 4, actual: bytes.len() });
    }
    if &bytes[..4] != SSRF_MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(SSRF_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let version = read_u32(bytes, 4)?;
    if version != SSRF_VERSION {
        return Err(FormatError::UnsupportedVersion { expected: SSRF_VERSION, found: version });
    }
    let ndims = read_u32(bytes, 8)? as usize;
    if ndims != 3 {
        return Err(FormatError::Malformed(format!("expected 3 dims (C, h, w), found {ndims}")));
    }
    let dims = (0..ndims).map(|i| read_u32(bytes, 12 + 4 * i).map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    if dims.contains(&0) {
        return Err(FormatError::Malformed(format!("zero dimension in {dims:?}")));
    }
    let header = 12 + 4 * ndims;
    let numel: usize = dims.iter().product();
    let expected = header + 4 * numel;
    if bytes.len() < expected {
        return Err(FormatError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes { extra: bytes.len() - expected });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(dims, data).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn save_features(feat: &TeacherFeature, path: &Path) -> Result<()> {
    fs::write(path, encode_features(feat.tensor())?)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<TeacherFeature> {
    let bytes = fs::read(path)?;
    let t = decode_features(&bytes)?;
    TeacherFeature::new(t, FeatureSource::File(path.to_path_buf()))
}

/// Path of the feature file for `image_id` inside `dir`.
pub fn feature_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.{FEATURE_EXTENSION}"))
}
