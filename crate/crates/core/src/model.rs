//! The dual-branch segmentation model.
//!
//! Both branches share one backbone and one decoder. The shadow branch is
//! `backbone → decoder`. The regularization branch refines every stage in the
//! stage mask with cross-attention against the projected teacher map (backbone
//! tokens as queries, residual add) before decoding. Refined maps go only to
//! the decoder; later backbone stages always consume the unrefined maps, so one
//! backbone pass serves both branches.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{PyramidEncoder, StageFeatures, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, map_to_tokens, tokens_to_map, Linear, MultiHeadCrossAttention, IGNORE_INDEX};
use crate::params::ParamStore;
use crate::rng::sub_rng;
use crate::teacher::TeacherFeature;
use crate::tensor::Tensor;

/// Subset of backbone stages `{0, 1, 2, 3}` that receive teacher regularization.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct StageMask(u8);

impl StageMask {
    pub const EMPTY: StageMask = StageMask(0);
    pub const FULL: StageMask = StageMask(0b1111);

    pub fn from_stages(stages: &[usize]) -> Result<Self> {
        let mut bits = 0u8;
        for &s in stages {
            if s >= NUM_STAGES {
                return Err(Error::Config(format!("stage index {s} outside 0..=3")));
            }
            bits |= 1 << s;
        }
        Ok(StageMask(bits))
    }

    pub fn contains(self, stage: usize) -> bool {
        stage < NUM_STAGES && self.0 & (1 << stage) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn stages(self) -> Vec<usize> {
        (0..NUM_STAGES).filter(|&s| self.contains(s)).collect()
    }

    /// Parses `"∅"` (or `""`, `"none"`) and comma-separated stage lists such as `"1,2,3"`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "∅" || s.eq_ignore_ascii_case("none") {
            return Ok(Self::EMPTY);
        }
        let stages = s
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                let digits = tok.strip_prefix('S').or_else(|| tok.strip_prefix('s')).unwrap_or(tok);
                digits
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("malformed stage token {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_stages(&stages)
    }

    /// Masks in Table-style order: ∅, {3}, {2,3}, {1,2,3}, {0,1,2,3}.
    pub fn ablation_grid() -> Vec<StageMask> {
        vec![
            StageMask(0),
            StageMask(0b1000),
            StageMask(0b1100),
            StageMask(0b1110),
            StageMask(0b1111),
        ]
    }
}

impl TryFrom<Vec<usize>> for StageMask {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::from_stages(&v)
    }
}

impl From<StageMask> for Vec<usize> {
    fn from(m: StageMask) -> Self {
        m.stages()
    }
}

impl fmt::Display for StageMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("∅");
        }
        let parts: Vec<String> = self.stages().iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl fmt::Debug for StageMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StageMask({self})")
    }
}

/// Architecture of the dual-branch model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsrConfig {
    pub stage_mask: StageMask,
    pub heads: usize,
    pub lambda_shadow: f64,
    pub num_classes: usize,
    pub backbone_channels: [usize; NUM_STAGES],
    pub teacher_channels: usize,
    pub decoder_dim: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
}

impl Default for SsrConfig {
    fn default() -> Self {
        Self {
            stage_mask: StageMask::FULL,
            heads: 1,
            lambda_shadow: 1.0,
            num_classes: 4,
            backbone_channels: [16, 32, 64, 128],
            teacher_channels: 32,
            decoder_dim: 64,
            mlp_ratio: 2,
            image_size: 64,
        }
    }
}

impl SsrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.heads == 0 {
            return bad("heads", "must be positive".into());
        }
        if let Some(c) = self.backbone_channels.iter().find(|&&c| c == 0 || c % self.heads != 0) {
            return bad("backbone_channels", format!("{c} must be positive and divisible by heads = {}", self.heads));
        }
        if self.teacher_channels == 0 || self.teacher_channels % self.heads != 0 {
            return bad("teacher_channels", format!("must be positive and divisible by heads = {}", self.heads));
        }
        if !(self.lambda_shadow >= 0.0 && self.lambda_shadow.is_finite()) {
            return bad("lambda_shadow", format!("{} must be finite and >= 0", self.lambda_shadow));
        }
        if self.num_classes < 2 || self.num_classes >= IGNORE_INDEX {
            return bad("num_classes", format!("{} must be in [2, {IGNORE_INDEX})", self.num_classes));
        }
        if self.decoder_dim == 0 || self.mlp_ratio == 0 {
            return bad("decoder_dim/mlp_ratio", "must be positive".into());
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad("image_size", format!("{} must be a positive multiple of 32", self.image_size));
        }
        Ok(())
    }
}

/// Lightweight all-stage fusion decoder: per-stage linear projection to a
/// common width, bilinear upsampling to the stride-4 grid, concatenation,
/// linear fusion + GELU, linear classifier, bilinear upsampling to the input.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub proj: Vec<Linear>,
    pub fuse: Linear,
    pub classifier: Linear,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        channels: [usize; NUM_STAGES],
        embed_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(store, &format!("decoder.proj{i}"), c, embed_dim, true, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Linear::new(store, "decoder.fuse", NUM_STAGES * embed_dim, embed_dim, true, false, rng)?;
        let classifier = Linear::new(store, "decoder.classifier", embed_dim, num_classes, true, false, rng)?;
        Ok(Self { proj, fuse, classifier, embed_dim, num_classes })
    }

    /// Logits `[K × out_h × out_w]` from four stage maps.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, maps: &[Var; NUM_STAGES], out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h0, w0) = tape.value(maps[0]).dims3()?;
        let mut columns = Vec::with_capacity(NUM_STAGES);
        for (i, (&map, proj)) in maps.iter().zip(&self.proj).enumerate() {
            let (_, h, w) = tape.value(map).dims3()?;
            let tokens = map_to_tokens(tape, map)?;
            let e = proj.forward(tape, store, tokens)?;
            if i == 0 {
                columns.push(e);
                continue;
            }
            let m = tokens_to_map(tape, e, h, w)?;
            let up = tape.resize_bilinear(m, h0, w0)?;
            columns.push(map_to_tokens(tape, up)?);
        }
        let cat = tape.concat_cols(&columns)?;
        let fused = self.fuse.forward(tape, store, cat)?;
        let fused = tape.gelu(fused);
        let scores = self.classifier.forward(tape, store, fused)?;
        let grid = tokens_to_map(tape, scores, h0, w0)?;
        if (h0, w0) == (out_h, out_w) {
            Ok(grid)
        } else {
            tape.resize_bilinear(grid, out_h, out_w)
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj.iter().map(Linear::param_count).sum::<usize>() + self.fuse.param_count() + self.classifier.param_count()
    }
}

pub fn decoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    decoder: &Decoder,
    features: &StageFeatures,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    decoder.forward(tape, store, &features.maps, out_h, out_w)
}

/// Training-only modules for one stage: teacher channel projection `C_s → C_i`
/// and cross-attention at width `C_i`.
#[derive(Clone, Debug)]
pub struct StageRegularizer {
    pub proj: Linear,
    pub xattn: MultiHeadCrossAttention,
}

impl StageRegularizer {
    pub fn param_count(&self) -> usize {
        self.proj.param_count() + self.xattn.param_count()
    }
}

/// A segmentation network with a shadow (inference) path and a regularized
/// (training) path.
pub trait Segmenter {
    fn config(&self) -> &SsrConfig;

    /// Backbone → decoder. Never touches teacher-related parameters.
    fn forward_shadow(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Var>;

    /// `(regularized logits, shadow logits)` from a single backbone pass.
    fn forward_pair(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &Tensor,
        teacher: Option<&TeacherFeature>,
    ) -> Result<(Var, Var)>;

    /// Whether `forward_pair` reads teacher features at all.
    fn uses_teacher(&self) -> bool;
}

#[derive(Clone, Debug)]
pub struct SsrModel {
    pub config: SsrConfig,
    pub backbone: PyramidEncoder,
    pub decoder: Decoder,
    pub regularizers: Vec<Option<StageRegularizer>>,
}

/// Builds the shared backbone and decoder from the `init.shared` stream.
fn build_shared(config: &SsrConfig, seed: u64, store: &mut ParamStore) -> Result<(PyramidEncoder, Decoder)> {
    config.validate()?;
    let mut rng = sub_rng(seed, "init.shared");
    let backbone = PyramidEncoder::new(store, config.backbone_channels, config.heads, config.mlp_ratio, &mut rng)?;
    let decoder = Decoder::new(store, config.backbone_channels, config.decoder_dim, config.num_classes, &mut rng)?;
    Ok((backbone, decoder))
}

fn check_image(config: &SsrConfig, image: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected a [3×H×W] image, got {:?}", image.shape())));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(format!("image size {h}x{w} must be divisible by 32")));
    }
    let _ = config;
    Ok((h, w))
}

impl SsrModel {
    /// Constructs the model and registers its parameters. Backbone and
    /// decoder draw from the `init.shared` stream and the stage regularizers
    /// from `init.ssr`, so the shared weights do not depend on the stage mask.
    pub fn new(config: SsrConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let (backbone, decoder) = build_shared(&config, seed, &mut store)?;
        let mut rng = sub_rng(seed, "init.ssr");
        let mut regularizers = Vec::with_capacity(NUM_STAGES);
        for (i, &c) in config.backbone_channels.iter().enumerate() {
            if !config.stage_mask.contains(i) {
                regularizers.push(None);
                continue;
            }
            let prefix = format!("ssr.stage{i}");
            let proj = Linear::new(&mut store, &format!("{prefix}.proj"), config.teacher_channels, c, true, false, &mut rng)?;
            let xattn = MultiHeadCrossAttention::new(&mut store, &format!("{prefix}.xattn"), c, config.heads, false, false, &mut rng)?;
            regularizers.push(Some(StageRegularizer { proj, xattn }));
        }
        Ok((Self { config, backbone, decoder, regularizers }, store))
    }

    /// `F_i + CrossAttn(tokens(F_i), proj_i(tokens(G)))`, reshaped back to `[C_i×H_i×W_i]`.
    pub fn regularize_stage(&self, tape: &mut Tape, store: &ParamStore, feature: Var, teacher: Var, stage: usize) -> Result<Var> {
        let reg = self
            .regularizers
            .get(stage)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::contract(format!("stage {stage} is not in the stage mask {}", self.config.stage_mask)))?;
        let (_, h, w) = tape.value(feature).dims3()?;
        let query = map_to_tokens(tape, feature)?;
        let ctx = map_to_tokens(tape, teacher)?;
        let ctx = reg.proj.forward(tape, store, ctx)?;
        let attended = reg.xattn.forward(tape, store, query, ctx)?;
        let out = tape.add(query, attended)?;
        tokens_to_map(tape, out, h, w)
    }

    /// Stage maps after regularization; stages outside the mask pass through unchanged.
    pub fn regularized_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &StageFeatures,
        teacher: Option<&TeacherFeature>,
    ) -> Result<StageFeatures> {
        if self.config.stage_mask.is_empty() {
            return Ok(*features);
        }
        let g = teacher.ok_or_else(|| Error::contract("regularized forward needs a teacher feature map"))?;
        if g.channels() != self.config.teacher_channels {
            return Err(Error::shape(format!(
                "teacher feature {:?} has {} channels, model expects {}",
                g.tensor().shape(),
                g.channels(),
                self.config.teacher_channels
            )));
        }
        let gv = tape.constant(g.tensor().clone());
        let mut maps = features.maps;
        for stage in self.config.stage_mask.stages() {
            maps[stage] = self.regularize_stage(tape, store, features.maps[stage], gv, stage)?;
        }
        Ok(StageFeatures { maps })
    }

    pub fn forward_regularized(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &Tensor,
        teacher: Option<&TeacherFeature>,
    ) -> Result<Var> {
        let (h, w) = check_image(&self.config, image)?;
        let img = tape.constant(image.clone());
        let feats = self.backbone.encode(tape, store, img)?;
        let reg = self.regularized_features(tape, store, &feats, teacher)?;
        self.decoder.forward(tape, store, &reg.maps, h, w)
    }

    /// Backbone + decoder parameter count: what inference needs.
    pub fn inference_param_count(&self) -> usize {
        self.backbone.param_count() + self.decoder.param_count()
    }

    pub fn total_param_count(&self) -> usize {
        self.inference_param_count() + self.regularizers.iter().flatten().map(StageRegularizer::param_count).sum::<usize>()
    }
}

impl Segmenter for SsrModel {
    fn config(&self) -> &SsrConfig {
        &self.config
    }

    fn forward_shadow(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Var> {
        shadow(&self.backbone, &self.decoder, tape, store, image, &self.config)
    }

    fn forward_pair(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, teacher: Option<&TeacherFeature>) -> Result<(Var, Var)> {
        let (h, w) = check_image(&self.config, image)?;
        let img = tape.constant(image.clone());
        let feats = self.backbone.encode(tape, store, img)?;
        let reg = self.regularized_features(tape, store, &feats, teacher)?;
        let reg_logits = self.decoder.forward(tape, store, &reg.maps, h, w)?;
        let shadow_logits = self.decoder.forward(tape, store, &feats.maps, h, w)?;
        Ok((reg_logits, shadow_logits))
    }

    fn uses_teacher(&self) -> bool {
        !self.config.stage_mask.is_empty()
    }
}

fn shadow(backbone: &PyramidEncoder, decoder: &Decoder, tape: &mut Tape, store: &ParamStore, image: &Tensor, config: &SsrConfig) -> Result<Var> {
    let (h, w) = check_image(config, image)?;
    let img = tape.constant(image.clone());
    let feats = backbone.encode(tape, store, img)?;
    decoder.forward(tape, store, &feats.maps, h, w)
}

/// Backbone + decoder only: the segmentation network with no teacher
/// regularization code at all. Its "pair" forward decodes the same features
/// twice, mirroring the two loss terms of the dual-branch model.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub config: SsrConfig,
    pub backbone: PyramidEncoder,
    pub decoder: Decoder,
}

impl BaselineModel {
    pub fn new(config: SsrConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let (backbone, decoder) = build_shared(&config, seed, &mut store)?;
        Ok((Self { config, backbone, decoder }, store))
    }

    pub fn inference_param_count(&self) -> usize {
        self.backbone.param_count() + self.decoder.param_count()
    }
}

impl Segmenter for BaselineModel {
    fn config(&self) -> &SsrConfig {
        &self.config
    }

    fn forward_shadow(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Var> {
        shadow(&self.backbone, &self.decoder, tape, store, image, &self.config)
    }

    fn forward_pair(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, _teacher: Option<&TeacherFeature>) -> Result<(Var, Var)> {
        let (h, w) = check_image(&self.config, image)?;
        let img = tape.constant(image.clone());
        let feats = self.backbone.encode(tape, store, img)?;
        let first = self.decoder.forward(tape, store, &feats.maps, h, w)?;
        let second = self.decoder.forward(tape, store, &feats.maps, h, w)?;
        Ok((first, second))
    }

    fn uses_teacher(&self) -> bool {
        false
    }
}

/// Per-pixel cross-entropy of `[K×H×W]` logits against a row-major label map.
pub fn segmentation_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let tokens = map_to_tokens(tape, logits)?;
    cross_entropy(tape, tokens, labels, IGNORE_INDEX)
}

/// `CE(regularized) + λ·CE(shadow)`.
pub fn combined_loss(tape: &mut Tape, logits_reg: Var, logits_shadow: Var, labels: &[usize], lambda: f64) -> Result<Var> {
    if tape.shape(logits_reg) != tape.shape(logits_shadow) {
        return Err(Error::shape(format!(
            "combined_loss: branch logits {:?} and {:?} differ",
            tape.shape(logits_reg),
            tape.shape(logits_shadow)
        )));
    }
    let reg = segmentation_loss(tape, logits_reg, labels)?;
    let shadow = segmentation_loss(tape, logits_shadow, labels)?;
    let shadow = tape.scale(shadow, lambda);
    tape.add(reg, shadow)
}

/// Per-pixel argmax over classes; ties resolve to the lowest class index.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<usize>> {
    let (k, h, w) = logits.dims3()?;
    let n = h * w;
    let d = logits.data();
    Ok((0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + p] > d[best * n + p] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> SsrConfig {
        SsrConfig {
            backbone_channels: [4, 8, 16, 32],
            teacher_channels: 8,
            decoder_dim: 8,
            num_classes: 3,
            image_size: 32,
            ..SsrConfig::default()
        }
    }

    fn image(seed: u64) -> Tensor {
        Tensor::from_fn([3, 32, 32], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0)
    }

    fn teacher_map(c: usize) -> TeacherFeature {
        TeacherFeature::new(Tensor::from_fn([c, 2, 2], |i| (i as f64 * 0.7).sin()), crate::teacher::FeatureSource::Builtin).unwrap()
    }

    #[test]
    fn stage_mask_parsing() {
        assert_eq!(StageMask::parse("∅").unwrap(), StageMask::EMPTY);
        assert_eq!(StageMask::parse("0,1,2,3").unwrap(), StageMask::FULL);
        assert_eq!(StageMask::parse("S2, S3").unwrap().stages(), vec![2, 3]);
        assert!(StageMask::parse("4").is_err());
        assert!(StageMask::parse("x").is_err());
        assert_eq!(StageMask::parse("1,2,3").unwrap().to_string(), "1,2,3");
        let json = serde_json::to_string(&StageMask::parse("2,3").unwrap()).unwrap();
        assert_eq!(json, "[2,3]");
        assert!(serde_json::from_str::<StageMask>("[5]").is_err());
    }

    #[test]
    fn regularizers_exist_only_for_masked_stages() {
        let cfg = SsrConfig { stage_mask: StageMask::parse("3").unwrap(), ..micro() };
        let (model, store) = SsrModel::new(cfg, 0).unwrap();
        assert!(model.regularizers[..3].iter().all(Option::is_none));
        assert!(store.iter().filter(|(_, p)| p.name.starts_with("ssr.")).all(|(_, p)| p.name.starts_with("ssr.stage3.")));
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros([4, 8, 8]));
        let g = tape.constant(Tensor::zeros([8, 2, 2]));
        assert!(matches!(model.regularize_stage(&mut tape, &store, f, g, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_output_projection_is_residual_identity() {
        let (model, mut store) = SsrModel::new(micro(), 1).unwrap();
        let wo = model.regularizers[1].as_ref().unwrap().xattn.wo.w;
        store.get_mut(wo).value = Tensor::zeros([8, 8]);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_fn([8, 4, 4], |i| (i as f64).cos()));
        let g = tape.constant(teacher_map(8).tensor().clone());
        let out = model.regularize_stage(&mut tape, &store, f, g, 1).unwrap();
        assert!(tape.value(out).bit_eq(tape.value(f)));
    }

    #[test]
    fn regularize_stage_preserves_shape() {
        let cfg = SsrConfig { backbone_channels: [32, 32, 32, 32], teacher_channels: 32, ..micro() };
        let (model, store) = SsrModel::new(cfg, 2).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_fn([32, 8, 8], |i| (i as f64 * 0.01).sin()));
        let g = tape.constant(Tensor::from_fn([32, 4, 4], |i| (i as f64 * 0.02).cos()));
        let out = model.regularize_stage(&mut tape, &store, f, g, 0).unwrap();
        assert_eq!(tape.shape(out), &[32, 8, 8]);
    }

    /// Dense-loop oracle: residual + single-head attention with explicit
    /// softmax and weighted sums, written without the tape.
    #[test]
    fn regularize_stage_matches_dense_oracle() {
        let cfg = SsrConfig { backbone_channels: [2, 4, 4, 4], teacher_channels: 3, ..micro() };
        let (model, store) = SsrModel::new(cfg, 3).unwrap();
        let reg = model.regularizers[0].as_ref().unwrap();
        let get = |id| store.get(id).value.data().to_vec();
        let (pw, pb) = (get(reg.proj.w), get(reg.proj.b.unwrap()));
        let (wq, wk, wv, wo) = (get(reg.xattn.wq.w), get(reg.xattn.wk.w), get(reg.xattn.wv.w), get(reg.xattn.wo.w));

        // F: [2 × 2 × 2] → N = 4 tokens; G: [3 × 2 × 2] → M = 4 tokens.
        let f: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let g: Vec<f64> = (0..12).map(|i| ((i * 5) % 7) as f64 * 0.2 - 0.5).collect();
        let c = 2;
        let tok = |m: &[f64], ch: usize, n: usize, t: usize| -> Vec<f64> { (0..ch).map(|k| m[k * n + t]).collect() };
        let mul = |x: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
            (0..cols).map(|j| x.iter().enumerate().map(|(t, v)| v * w[t * cols + j]).sum()).collect()
        };
        let ctx: Vec<Vec<f64>> = (0..4)
            .map(|t| mul(&tok(&g, 3, 4, t), &pw, c).iter().zip(&pb).map(|(a, b)| a + b).collect())
            .collect();
        let mut expect = vec![0.0; 8];
        for n in 0..4 {
            let x = tok(&f, c, 4, n);
            let q = mul(&x, &wq, c);
            let scores: Vec<f64> = ctx
                .iter()
                .map(|cm| mul(cm, &wk, c).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut mixed = vec![0.0; c];
            for (s, cm) in scores.iter().zip(&ctx) {
                let v = mul(cm, &wv, c);
                for k in 0..c {
                    mixed[k] += s.exp() / z * v[k];
                }
            }
            let o = mul(&mixed, &wo, c);
            for k in 0..c {
                expect[k * 4 + n] = x[k] + o[k];
            }
        }

        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::new([2, 2, 2], f).unwrap());
        let gv = tape.constant(Tensor::new([3, 2, 2], g).unwrap());
        let out = model.regularize_stage(&mut tape, &store, fv, gv, 0).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_mask_pair_equals_shadow() {
        let cfg = SsrConfig { stage_mask: StageMask::EMPTY, ..micro() };
        let (model, store) = SsrModel::new(cfg, 4).unwrap();
        let img = image(1);
        let mut tape = Tape::new();
        let (r, s) = model.forward_pair(&mut tape, &store, &img, None).unwrap();
        let mut t2 = Tape::new();
        let shadow = model.forward_shadow(&mut t2, &store, &img).unwrap();
        let reg = model.forward_regularized(&mut t2, &store, &img, None).unwrap();
        assert!(tape.value(r).bit_eq(t2.value(shadow)));
        assert!(tape.value(s).bit_eq(t2.value(shadow)));
        assert!(t2.value(reg).bit_eq(t2.value(shadow)));
    }

    #[test]
    fn regularized_forward_needs_teacher() {
        let (model, store) = SsrModel::new(micro(), 5).unwrap();
        let mut tape = Tape::new();
        let err = model.forward_regularized(&mut tape, &store, &image(0), None).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn stage3_mask_alters_only_stage3() {
        let cfg = SsrConfig { stage_mask: StageMask::parse("3").unwrap(), ..micro() };
        let (model, store) = SsrModel::new(cfg, 6).unwrap();
        let mut tape = Tape::new();
        let img = tape.constant(image(2));
        let feats = model.backbone.encode(&mut tape, &store, img).unwrap();
        let g = teacher_map(8);
        let reg = model.regularized_features(&mut tape, &store, &feats, Some(&g)).unwrap();
        for i in 0..3 {
            assert!(tape.value(reg.maps[i]).bit_eq(tape.value(feats.maps[i])));
        }
        assert!(!tape.value(reg.maps[3]).bit_eq(tape.value(feats.maps[3])));
    }

    #[test]
    fn decoder_shapes_and_zero_case() {
        let cfg = SsrConfig { num_classes: 4, image_size: 64, ..SsrConfig::default() };
        let (model, mut store) = SsrModel::new(cfg, 7).unwrap();
        let mut tape = Tape::no_grad();
        let logits = model.forward_shadow(&mut tape, &store, &Tensor::full([3, 64, 64], 0.3)).unwrap();
        assert_eq!(tape.shape(logits), &[4, 64, 64]);

        for id in store.ids() {
            if store.get(id).name.starts_with("decoder.") && store.get(id).name.ends_with(".b") {
                let shape = store.get(id).value.shape().to_vec();
                store.get_mut(id).value = Tensor::zeros(shape);
            }
        }
        let mut tape = Tape::no_grad();
        let maps = [
            tape.constant(Tensor::zeros([16, 16, 16])),
            tape.constant(Tensor::zeros([32, 8, 8])),
            tape.constant(Tensor::zeros([64, 4, 4])),
            tape.constant(Tensor::zeros([128, 2, 2])),
        ];
        let out = model.decoder.forward(&mut tape, &store, &maps, 64, 64).unwrap();
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn combined_loss_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn([3, 1, 2], |i| i as f64 * 0.4 - 0.3));
        let b = tape.leaf(Tensor::from_fn([3, 1, 2], |i| (i as f64).sin()));
        let labels = [2, 0];
        let single = segmentation_loss(&mut tape, a, &labels).unwrap();
        let l0 = combined_loss(&mut tape, a, b, &labels, 0.0).unwrap();
        assert_eq!(tape.value(l0).item(), tape.value(single).item());
        let same = combined_loss(&mut tape, a, a, &labels, 1.0).unwrap();
        assert_eq!(tape.value(same).item(), 2.0 * tape.value(single).item());

        // Two-pixel oracle, per branch: mean of −log softmax at the label.
        let ce = |logits: &[f64]| -> f64 {
            let px = |p: usize, lab: usize| {
                let col: Vec<f64> = (0..3).map(|k| logits[k * 2 + p]).collect();
                let z: f64 = col.iter().map(|v| v.exp()).sum();
                -(col[lab].exp() / z).ln()
            };
            (px(0, 2) + px(1, 0)) / 2.0
        };
        let l1 = combined_loss(&mut tape, a, b, &labels, 1.0).unwrap();
        let expect = ce(tape.value(a).data()) + ce(tape.value(b).data());
        assert!((tape.value(l1).item() - expect).abs() < 1e-12);

        let c = tape.leaf(Tensor::zeros([3, 2, 1]));
        assert!(matches!(combined_loss(&mut tape, a, c, &labels, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let logits = Tensor::new([3, 1, 2], vec![1.0, 0.0, 1.0, 0.0, 0.5, 0.0]).unwrap();
        assert_eq!(argmax_classes(&logits).unwrap(), vec![0, 0]);
    }
}
