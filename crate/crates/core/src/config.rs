//! Run configuration: model, training, data and output settings in one JSON record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::NUM_STAGES;
use crate::error::{Error, Result};
use crate::model::{SsrConfig, StageMask};
use crate::teacher::TEACHER_STRIDE;

/// Where teacher feature maps come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TeacherSpec {
    Builtin,
    Files(PathBuf),
}

impl TeacherSpec {
    /// `"builtin"` or `"files:<dir>"`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "builtin" {
            return Ok(TeacherSpec::Builtin);
        }
        match s.strip_prefix("files:") {
            Some(dir) if !dir.is_empty() => Ok(TeacherSpec::Files(PathBuf::from(dir))),
            _ => Err(Error::Config(format!("teacher: expected \"builtin\" or \"files:<dir>\", got {s:?}"))),
        }
    }
}

/// Optimization settings of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub source_batch: usize,
    pub target_batch: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub confidence_threshold: f64,
    pub lambda_shadow: f64,
    pub stage_mask: StageMask,
    pub eval_interval: usize,
    /// Multiplier on the pseudo-label term; 1 in every configured run.
    pub target_weight: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.steps == 0 {
            return bad("steps", "must be at least 1".into());
        }
        if self.source_batch == 0 {
            return bad("source_batch", "must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} must be finite and positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay", format!("{} must lie in [0, 1]", self.ema_decay));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return bad("confidence_threshold", format!("{} must lie in (0, 1]", self.confidence_threshold));
        }
        if !(self.target_weight >= 0.0 && self.target_weight.is_finite()) {
            return bad("target_weight", format!("{} must be finite and >= 0", self.target_weight));
        }
        Ok(())
    }
}

/// Everything a command needs. Every key has a default; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub stage_mask: StageMask,
    pub heads: usize,
    pub lambda_shadow: f64,
    pub num_classes: usize,
    pub backbone_channels: [usize; NUM_STAGES],
    pub teacher_channels: usize,
    pub teacher_blocks: usize,
    pub decoder_dim: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
    pub steps: usize,
    pub source_batch: usize,
    pub target_batch: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub confidence_threshold: f64,
    pub eval_interval: usize,
    pub num_source: usize,
    pub num_target: usize,
    pub num_eval: usize,
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub teacher: String,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = SsrConfig::default();
        Self {
            seed: 0,
            stage_mask: m.stage_mask,
            heads: m.heads,
            lambda_shadow: m.lambda_shadow,
            num_classes: m.num_classes,
            backbone_channels: m.backbone_channels,
            teacher_channels: m.teacher_channels,
            teacher_blocks: 1,
            decoder_dim: m.decoder_dim,
            mlp_ratio: m.mlp_ratio,
            image_size: m.image_size,
            steps: 300,
            source_batch: 2,
            target_batch: 2,
            learning_rate: 1e-3,
            ema_decay: 0.99,
            confidence_threshold: 0.9,
            eval_interval: 0,
            num_source: 400,
            num_target: 400,
            num_eval: 100,
            source_dir: None,
            target_dir: None,
            eval_dir: None,
            teacher: "builtin".into(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn ssr_config(&self) -> SsrConfig {
        SsrConfig {
            stage_mask: self.stage_mask,
            heads: self.heads,
            lambda_shadow: self.lambda_shadow,
            num_classes: self.num_classes,
            backbone_channels: self.backbone_channels,
            teacher_channels: self.teacher_channels,
            decoder_dim: self.decoder_dim,
            mlp_ratio: self.mlp_ratio,
            image_size: self.image_size,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            steps: self.steps,
            source_batch: self.source_batch,
            target_batch: self.target_batch,
            learning_rate: self.learning_rate,
            ema_decay: self.ema_decay,
            confidence_threshold: self.confidence_threshold,
            lambda_shadow: self.lambda_shadow,
            stage_mask: self.stage_mask,
            eval_interval: self.eval_interval,
            target_weight: 1.0,
        }
    }

    pub fn teacher_spec(&self) -> Result<TeacherSpec> {
        TeacherSpec::parse(&self.teacher)
    }

    /// Checks every field; messages start with the offending key.
    pub fn validate(&self) -> Result<()> {
        self.ssr_config().validate()?;
        self.train_config().validate()?;
        self.teacher_spec()?;
        if self.teacher_blocks == 0 {
            return Err(Error::Config("teacher_blocks: must be at least 1".into()));
        }
        if self.image_size % TEACHER_STRIDE != 0 {
            return Err(Error::Config(format!("image_size: {} must be a multiple of {TEACHER_STRIDE}", self.image_size)));
        }
        if self.source_dir.is_none() && self.num_source == 0 {
            return Err(Error::Config("num_source: must be at least 1".into()));
        }
        if self.eval_dir.is_none() && self.num_eval == 0 {
            return Err(Error::Config("num_eval: must be at least 1".into()));
        }
        if self.target_batch > 0 && self.target_dir.is_none() && self.num_target == 0 {
            return Err(Error::Config("num_target: must be at least 1 when target_batch > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let msg = RunConfig::from_json(r#"{"foo": 1}"#).unwrap_err().to_string();
        assert!(msg.contains("foo"), "{msg}");
    }

    #[test]
    fn field_level_validation() {
        let msg = RunConfig::from_json(r#"{"confidence_threshold": 0}"#).unwrap_err().to_string();
        assert!(msg.contains("confidence_threshold"), "{msg}");
        let msg = RunConfig::from_json(r#"{"stage_mask": [0, 4]}"#).unwrap_err().to_string();
        assert!(msg.contains("stage"), "{msg}");
        let msg = RunConfig::from_json(r#"{"image_size": 48}"#).unwrap_err().to_string();
        assert!(msg.contains("image_size"), "{msg}");
    }

    #[test]
    fn teacher_spec_parsing() {
        assert_eq!(TeacherSpec::parse("builtin").unwrap(), TeacherSpec::Builtin);
        assert_eq!(TeacherSpec::parse("files:/tmp/x").unwrap(), TeacherSpec::Files("/tmp/x".into()));
        assert!(TeacherSpec::parse("files:").is_err());
        assert!(TeacherSpec::parse("sam").is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig { seed: 9, stage_mask: StageMask::parse("2,3").unwrap(), ..RunConfig::default() };
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
