//! Desk-scale domain-adaptation loop: supervised source loss plus
//! confidence-weighted pseudo-label loss on target images, with an EMA copy of
//! the student producing the pseudo-labels through its shadow path. Only
//! pixels whose pseudo-label confidence reaches `τ` enter the target loss.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{RunConfig, TeacherSpec, TrainConfig};
use crate::data::{gen_split, read_dataset, Domain, ToySegSample};
use crate::error::{Error, Result};
use crate::metrics::{miou, percent, ConfusionMatrix, MetricsReport};
use crate::model::{argmax_classes, combined_loss, BaselineModel, Segmenter, SsrModel, StageMask};
use crate::nn::IGNORE_INDEX;
use crate::optim::{Algorithm, Ema, Optimizer};
use crate::params::ParamStore;
use crate::rng::sub_rng;
use crate::teacher::{feature_path, load_features, TeacherFeature, TeacherModel, TEACHER_STRIDE};
use crate::tensor::Tensor;

/// Per-pixel argmax labels of a teacher prediction and the fraction of
/// pixels whose top softmax probability reaches the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Vec<usize>,
    pub quality: f64,
    /// Per pixel: top softmax probability `≥ τ`.
    pub confident: Vec<bool>,
}

impl PseudoLabelBatch {
    /// Labels for the target loss: pixels below `τ` become [`IGNORE_INDEX`].
    pub fn training_labels(&self) -> Vec<usize> {
        self.labels.iter().zip(&self.confident).map(|(&l, &c)| if c { l } else { IGNORE_INDEX }).collect()
    }
}

/// Labels are the per-pixel argmax (ties go to the lowest class index);
/// quality is `#{p : max softmax ≥ τ} / #pixels`.
pub fn pseudo_label(logits: &Tensor, tau: f64) -> Result<PseudoLabelBatch> {
    if !logits.is_finite() {
        return Err(Error::Numeric("pseudo-label logits contain NaN or infinity".into()));
    }
    let labels = argmax_classes(logits)?;
    let (k, h, w) = logits.dims3()?;
    let n = h * w;
    let d = logits.data();
    let confident: Vec<bool> = labels
        .iter()
        .enumerate()
        .map(|(p, &best)| {
            let top = d[best * n + p];
            let z: f64 = (0..k).map(|c| (d[c * n + p] - top).exp()).sum();
            1.0 / z >= tau
        })
        .collect();
    let count = confident.iter().filter(|&&c| c).count();
    Ok(PseudoLabelBatch { labels, quality: count as f64 / n as f64, confident })
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_src: f64,
    pub loss_tgt: f64,
    pub quality: f64,
}

/// Source of the teacher map `G` for each image, cached by image id.
pub struct FeatureProvider {
    kind: ProviderKind,
    cache: HashMap<String, TeacherFeature>,
}

enum ProviderKind {
    Builtin(TeacherModel),
    Files(PathBuf),
    Zeros(usize),
}

impl FeatureProvider {
    pub fn builtin(model: TeacherModel) -> Self {
        Self { kind: ProviderKind::Builtin(model), cache: HashMap::new() }
    }

    /// Reads `<dir>/<image_id>.ssrf`.
    pub fn files(dir: impl Into<PathBuf>) -> Self {
        Self { kind: ProviderKind::Files(dir.into()), cache: HashMap::new() }
    }

    /// All-zero maps with `channels` channels at stride 16.
    pub fn zeros(channels: usize) -> Self {
        Self { kind: ProviderKind::Zeros(channels), cache: HashMap::new() }
    }

    pub fn from_spec(spec: &TeacherSpec, cfg: &RunConfig) -> Result<Self> {
        Ok(match spec {
            TeacherSpec::Builtin => Self::builtin(TeacherModel::new(cfg.teacher_channels, cfg.teacher_blocks, cfg.heads, cfg.seed)?),
            TeacherSpec::Files(dir) => Self::files(dir.clone()),
        })
    }

    pub fn teacher(&self) -> Option<&TeacherModel> {
        match &self.kind {
            ProviderKind::Builtin(m) => Some(m),
            _ => None,
        }
    }

    pub fn feature(&mut self, sample: &ToySegSample) -> Result<TeacherFeature> {
        if let Some(f) = self.cache.get(&sample.id) {
            return Ok(f.clone());
        }
        let f = match &self.kind {
            ProviderKind::Builtin(m) => m.forward(&sample.image)?,
            ProviderKind::Files(dir) => {
                let path = feature_path(dir, &sample.id);
                if !path.exists() {
                    return Err(Error::Data(format!(
                        "missing teacher features for image id {:?} (expected {})",
                        sample.id,
                        path.display()
                    )));
                }
                load_features(&path).map_err(|e| Error::Data(format!("teacher features for image id {:?}: {e}", sample.id)))?
            }
            ProviderKind::Zeros(c) => {
                let shape = [*c, sample.height() / TEACHER_STRIDE, sample.width() / TEACHER_STRIDE];
                TeacherFeature::new(Tensor::zeros(shape), crate::teacher::FeatureSource::Builtin)?
            }
        };
        self.cache.insert(sample.id.clone(), f.clone());
        Ok(f)
    }
}

/// Student, EMA copy, optimizer and feature source for one run.
pub struct Trainer<M: Segmenter> {
    pub model: M,
    pub store: ParamStore,
    pub ema: Ema,
    pub optimizer: Optimizer,
    pub cfg: TrainConfig,
    pub features: FeatureProvider,
    sampler: ChaCha8Rng,
    steps_done: usize,
}

impl<M: Segmenter> Trainer<M> {
    pub fn new(model: M, store: ParamStore, cfg: TrainConfig, features: FeatureProvider) -> Result<Self> {
        cfg.validate()?;
        let ema = Ema::new(&store, cfg.ema_decay)?;
        let optimizer = Optimizer::new(&store, Algorithm::adam(), cfg.learning_rate);
        let sampler = sub_rng(cfg.seed, "train.sampling");
        Ok(Self { model, store, ema, optimizer, cfg, features, sampler, steps_done: 0 })
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    fn teacher_for(&mut self, sample: &ToySegSample) -> Result<Option<TeacherFeature>> {
        if self.model.uses_teacher() {
            self.features.feature(sample).map(Some)
        } else {
            Ok(None)
        }
    }

    fn pair_loss(&self, tape: &mut Tape, sample: &ToySegSample, g: Option<&TeacherFeature>, labels: &[usize]) -> Result<Var> {
        let (reg, shadow) = self.model.forward_pair(tape, &self.store, &sample.image, g)?;
        combined_loss(tape, reg, shadow, labels, self.cfg.lambda_shadow)
    }

    /// `L = mean_s combined(s) + mean_t q_t·combined(t, pseudo)`, with
    /// unconfident target pixels ignored, then backward,
    /// optimizer step and EMA update. Targets with zero weight are skipped, so
    /// a step where every `q_t = 0` is exactly a source-only step.
    pub fn train_step(&mut self, src: &[&ToySegSample], tgt: &[&ToySegSample]) -> Result<StepRecord> {
        if src.is_empty() {
            return Err(Error::contract("train_step needs at least one source image"));
        }
        let src_g = src.iter().map(|s| self.teacher_for(s)).collect::<Result<Vec<_>>>()?;
        let tgt_g = tgt.iter().map(|s| self.teacher_for(s)).collect::<Result<Vec<_>>>()?;

        let mut pseudo = Vec::with_capacity(tgt.len());
        for s in tgt {
            let mut tape = Tape::no_grad();
            let logits = self.model.forward_shadow(&mut tape, self.ema.params(), &s.image)?;
            pseudo.push(pseudo_label(tape.value(logits), self.cfg.confidence_threshold)?);
        }

        let mut tape = Tape::new();
        let mut src_total: Option<Var> = None;
        for (s, g) in src.iter().zip(&src_g) {
            let l = self.pair_loss(&mut tape, s, g.as_ref(), &s.labels)?;
            src_total = Some(match src_total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let src_mean = tape.scale(src_total.expect("nonempty source batch"), 1.0 / src.len() as f64);

        let mut tgt_total: Option<Var> = None;
        for ((s, g), pl) in tgt.iter().zip(&tgt_g).zip(&pseudo) {
            let weight = self.cfg.target_weight * pl.quality / tgt.len() as f64;
            if weight == 0.0 {
                continue;
            }
            let l = self.pair_loss(&mut tape, s, g.as_ref(), &pl.training_labels())?;
            let l = tape.scale(l, weight);
            tgt_total = Some(match tgt_total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let loss = match tgt_total {
            Some(t) => tape.add(src_mean, t)?,
            None => src_mean,
        };
        let loss_src = tape.value(src_mean).item();
        let loss_tgt = tgt_total.map_or(0.0, |t| tape.value(t).item());
        let quality = if pseudo.is_empty() { 0.0 } else { pseudo.iter().map(|p| p.quality).sum::<f64>() / pseudo.len() as f64 };

        let grads = tape.backward(loss)?;
        grads.accumulate_into(&mut self.store);
        self.optimizer.step(&mut self.store)?;
        self.steps_done += 1;
        self.ema.update(&self.store)?;
        Ok(StepRecord { step: self.steps_done, loss_src, loss_tgt, quality })
    }

    /// Draws the next batch indices (with replacement) from the sampling stream.
    pub fn sample_batch(&mut self, n_src: usize, n_tgt: usize) -> (Vec<usize>, Vec<usize>) {
        let s = (0..self.cfg.source_batch).map(|_| self.sampler.gen_range(0..n_src)).collect();
        let t = if n_tgt == 0 {
            Vec::new()
        } else {
            (0..self.cfg.target_batch).map(|_| self.sampler.gen_range(0..n_tgt)).collect()
        };
        (s, t)
    }

    /// Runs `cfg.steps` steps. `on_step` sees every record and, every
    /// `eval_interval` steps, the shadow-path metrics on `data.eval`.
    pub fn run(
        &mut self,
        data: &Datasets,
        mut on_step: impl FnMut(&StepRecord, Option<&MetricsReport>) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let (si, ti) = self.sample_batch(data.source.len(), data.target.len());
            let src: Vec<&ToySegSample> = si.iter().map(|&i| &data.source[i]).collect();
            let tgt: Vec<&ToySegSample> = ti.iter().map(|&i| &data.target[i]).collect();
            let rec = self.train_step(&src, &tgt)?;
            let report = if self.cfg.eval_interval > 0 && rec.step % self.cfg.eval_interval == 0 {
                Some(evaluate(&self.model, &self.store, &data.eval)?)
            } else {
                None
            };
            on_step(&rec, report.as_ref())?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Shadow-path evaluation over `samples`.
pub fn evaluate<M: Segmenter>(model: &M, store: &ParamStore, samples: &[ToySegSample]) -> Result<MetricsReport> {
    let mut conf = ConfusionMatrix::new(model.config().num_classes);
    for s in samples {
        let mut tape = Tape::no_grad();
        let logits = model.forward_shadow(&mut tape, store, &s.image)?;
        let pred = argmax_classes(tape.value(logits))?;
        conf.update(&pred, &s.labels, IGNORE_INDEX)?;
    }
    miou(&conf)
}

/// Source and target training images and the labelled target evaluation set.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source: Vec<ToySegSample>,
    pub target: Vec<ToySegSample>,
    pub eval: Vec<ToySegSample>,
}

impl Datasets {
    /// Reads configured directories or generates the missing splits from `cfg.seed`.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let split = |dir: &Option<PathBuf>, name: &str, domain: Domain, count: usize| -> Result<Vec<ToySegSample>> {
            match dir {
                Some(d) => read_dataset(d),
                None => gen_split(cfg.seed, name, domain, cfg.num_classes, cfg.image_size, count),
            }
        };
        let target = if cfg.target_batch == 0 && cfg.target_dir.is_none() {
            Vec::new()
        } else {
            split(&cfg.target_dir, "target", Domain::Target, cfg.num_target)?
        };
        let data = Self {
            source: split(&cfg.source_dir, "source", Domain::Source, cfg.num_source)?,
            target,
            eval: split(&cfg.eval_dir, "eval", Domain::Target, cfg.num_eval)?,
        };
        data.check(cfg.num_classes)?;
        Ok(data)
    }

    fn check(&self, k: usize) -> Result<()> {
        for s in self.source.iter().chain(&self.target).chain(&self.eval) {
            let (h, w) = (s.height(), s.width());
            if h % 32 != 0 || w % 32 != 0 {
                return Err(Error::Data(format!("image {:?} is {h}x{w}; sides must be multiples of 32", s.id)));
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= k && l != IGNORE_INDEX) {
                return Err(Error::Data(format!("image {:?} has label {bad} outside [0, {k})", s.id)));
            }
        }
        Ok(())
    }
}

/// A finished run: trained weights, loss log and final shadow-path metrics.
pub struct RunOutcome<M> {
    pub model: M,
    pub store: ParamStore,
    pub records: Vec<StepRecord>,
    pub report: MetricsReport,
    /// `(before, after)` checksums of the built-in teacher, when one is used.
    pub teacher_checksums: Option<(String, String)>,
    pub optimizer_state_len: usize,
    pub ema_param_count: usize,
}

fn run_with<M: Segmenter>(
    model: M,
    store: ParamStore,
    cfg: &RunConfig,
    data: &Datasets,
    features: FeatureProvider,
    on_step: impl FnMut(&StepRecord, Option<&MetricsReport>) -> Result<()>,
) -> Result<RunOutcome<M>> {
    let before = features.teacher().map(TeacherModel::checksum);
    let mut trainer = Trainer::new(model, store, cfg.train_config(), features)?;
    let records = trainer.run(data, on_step)?;
    let report = evaluate(&trainer.model, &trainer.store, &data.eval)?;
    let after = trainer.features.teacher().map(TeacherModel::checksum);
    Ok(RunOutcome {
        optimizer_state_len: trainer.optimizer.state_len(),
        ema_param_count: trainer.ema.params().len(),
        teacher_checksums: before.zip(after),
        model: trainer.model,
        store: trainer.store,
        records,
        report,
    })
}

/// Builds the dual-branch model from `cfg`, trains it and evaluates the shadow path.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    data: &Datasets,
    on_step: impl FnMut(&StepRecord, Option<&MetricsReport>) -> Result<()>,
) -> Result<RunOutcome<SsrModel>> {
    cfg.validate()?;
    let features = FeatureProvider::from_spec(&cfg.teacher_spec()?, cfg)?;
    let (model, store) = SsrModel::new(cfg.ssr_config(), cfg.seed)?;
    run_with(model, store, cfg, data, features, on_step)
}

/// Same loop with the plain backbone + decoder network.
pub fn train_baseline(
    cfg: &RunConfig,
    data: &Datasets,
    on_step: impl FnMut(&StepRecord, Option<&MetricsReport>) -> Result<()>,
) -> Result<RunOutcome<BaselineModel>> {
    cfg.validate()?;
    let (model, store) = BaselineModel::new(cfg.ssr_config(), cfg.seed)?;
    run_with(model, store, cfg, data, FeatureProvider::zeros(cfg.teacher_channels), on_step)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mask: StageMask,
    /// Mean target mIoU over seeds, in `[0, 1]`.
    pub miou: f64,
    /// `miou − miou(∅)`.
    pub delta: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `mask,mIoU,Δ` with mIoU and Δ in percent, one decimal.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["mask", "mIoU", "Δ"]).map_err(csv_err)?;
        for r in &self.rows {
            let mut delta = percent(r.delta);
            if delta == "-0.0" {
                delta = "0.0".into();
            }
            w.write_record([r.mask.to_string(), percent(r.miou), delta]).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn row(&self, mask: StageMask) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mask == mask)
    }
}

/// Trains one model per `(mask, seed)` and tabulates mean target mIoU with
/// the gain over the empty mask. The empty mask is trained even when not
/// listed, since it anchors the Δ column. `on_run` sees `(mask, seed, mIoU)`.
pub fn run_ablation(
    masks: &[StageMask],
    base: &RunConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(StageMask, u64, f64),
) -> Result<AblationTable> {
    if masks.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one mask and one seed".into()));
    }
    let mut to_run = vec![StageMask::EMPTY];
    for &m in masks {
        if !to_run.contains(&m) {
            to_run.push(m);
        }
    }
    let mut scores: HashMap<StageMask, Vec<f64>> = HashMap::new();
    for &seed in seeds {
        let seeded = RunConfig { seed, ..base.clone() };
        seeded.validate()?;
        let data = Datasets::load(&seeded)?;
        for &mask in &to_run {
            let cfg = RunConfig { stage_mask: mask, ..seeded.clone() };
            let out = train_and_evaluate(&cfg, &data, |_, _| Ok(()))?;
            on_run(mask, seed, out.report.miou);
            scores.entry(mask).or_default().push(out.report.miou);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base_miou = mean(&scores[&StageMask::EMPTY]);
    let rows = masks
        .iter()
        .map(|&mask| {
            let per_seed = scores[&mask].clone();
            let m = mean(&per_seed);
            AblationRow { mask, miou: m, delta: m - base_miou, per_seed }
        })
        .collect();
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_label_examples() {
        let sharp = Tensor::new([2, 1, 2], vec![50.0, -50.0, -50.0, 50.0]).unwrap();
        let pl = pseudo_label(&sharp, 0.9).unwrap();
        assert_eq!(pl.labels, vec![0, 1]);
        assert_eq!(pl.quality, 1.0);

        let uniform = Tensor::zeros([4, 2, 2]);
        let pl = pseudo_label(&uniform, 0.5).unwrap();
        assert_eq!(pl.labels, vec![0; 4]);
        assert_eq!(pl.quality, 0.0);

        // 2×1 image with probabilities [0.9, 0.1] and [0.6, 0.4].
        let l = Tensor::new([2, 2, 1], vec![0.9f64.ln(), 0.6f64.ln(), 0.1f64.ln(), 0.4f64.ln()]).unwrap();
        let pl = pseudo_label(&l, 0.7).unwrap();
        assert_eq!(pl.labels, vec![0, 0]);
        assert_eq!(pl.quality, 0.5);
        assert_eq!(pl.training_labels(), vec![0, IGNORE_INDEX]);
    }

    #[test]
    fn ablation_csv_format() {
        let t = AblationTable {
            rows: vec![
                AblationRow { mask: StageMask::EMPTY, miou: 0.5, delta: 0.0, per_seed: vec![0.5] },
                AblationRow { mask: StageMask::parse("2,3").unwrap(), miou: 0.5123, delta: 0.0123, per_seed: vec![0.5123] },
                AblationRow { mask: StageMask::parse("3").unwrap(), miou: 0.4999, delta: -0.0001, per_seed: vec![0.4999] },
            ],
        };
        assert_eq!(t.to_csv().unwrap(), "mask,mIoU,Δ\n∅,50.0,0.0\n\"2,3\",51.2,1.2\n3,50.0,0.0\n");
    }
}
