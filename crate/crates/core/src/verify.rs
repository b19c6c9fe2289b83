//! The finite-difference verification suite: every differentiable tape
//! operation, the attention and normalization layers, and the full
//! dual-branch loss of a micro model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gelu, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{finite_diff_gradcheck, gradcheck_params, ParamGradcheck, DEFAULT_STEP};
use crate::model::{combined_loss, Segmenter, SsrConfig, SsrModel, StageMask};
use crate::nn::{cross_attention, MultiHeadCrossAttention, IGNORE_INDEX};
use crate::params::ParamStore;
use crate::teacher::TeacherModel;
use crate::tensor::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !(c.max_rel_error <= self.tolerance))
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `Σ v ⊙ R` for a fixed random `R`, so every output entry gets a distinct weight.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, tape.shape(v));
    let rv = tape.constant(r);
    let p = tape.mul(v, rv)?;
    Ok(tape.sum(p))
}

type Check = (String, Box<dyn Fn() -> Result<f64>>);

fn unary_check(name: &str, shape: &[usize], seed: u64, op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, shape);
    let f = move || finite_diff_gradcheck(|t, v| {
        let y = op(t, v)?;
        weighted_sum(t, y, seed + 1)
    }, &x, DEFAULT_STEP);
    (name.to_string(), Box::new(f))
}

/// Checks over a small parameter store; each tensor is probed at every entry.
fn store_check(
    name: &str,
    store: ParamStore,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var> + 'static,
) -> Check {
    let run = move || {
        let mut s = store.clone();
        let ids = s.ids();
        let report = gradcheck_params(&f, &mut s, &ids, DEFAULT_STEP, usize::MAX)?;
        Ok(report.iter().map(|r| r.max_entry_error).fold(0.0, f64::max))
    };
    (name.to_string(), Box::new(run))
}

fn store_of(rng: &mut ChaCha8Rng, tensors: &[(&str, &[usize])]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in tensors {
        s.register(*name, random(rng, shape), false).expect("distinct names");
    }
    s
}

fn p(tape: &mut Tape, store: &ParamStore, name: &str) -> Var {
    tape.param(store, store.id(name).expect("registered"))
}

fn op_checks(inject_fault: bool) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut checks: Vec<Check> = Vec::new();

    checks.push(store_check("matmul", store_of(&mut rng, &[("a", &[3, 4]), ("b", &[4, 2])]), |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let y = t.matmul(a, b)?;
        weighted_sum(t, y, 1)
    }));
    checks.push(store_check("add (broadcast)", store_of(&mut rng, &[("a", &[3, 4]), ("b", &[4])]), |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let y = t.add(a, b)?;
        weighted_sum(t, y, 2)
    }));
    checks.push(store_check("sub", store_of(&mut rng, &[("a", &[2, 3]), ("b", &[2, 3])]), |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let y = t.sub(a, b)?;
        weighted_sum(t, y, 3)
    }));
    checks.push(store_check("mul", store_of(&mut rng, &[("a", &[2, 3]), ("b", &[2, 3])]), |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let y = t.mul(a, b)?;
        weighted_sum(t, y, 4)
    }));
    checks.push(store_check("softmax(x·W)", store_of(&mut rng, &[("x", &[3, 4]), ("w", &[4, 5])]), |t, s| {
        let (x, w) = (p(t, s, "x"), p(t, s, "w"));
        let y = t.matmul(x, w)?;
        let y = t.softmax_lastdim(y)?;
        weighted_sum(t, y, 5)
    }));
    if inject_fault {
        let corrupted = |t: &mut Tape, v: Var| -> Result<Var> {
            Ok(t.custom_unary(
                v,
                |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|&z| gelu(z)).collect()).expect("same shape"),
                Box::new(|x, _, g| x.data().iter().zip(g).map(|(&z, &gi)| gi * (1.0 + 0.5 * z)).collect()),
            ))
        };
        checks.push(unary_check("gelu", &[3, 4], 6, corrupted));
    } else {
        checks.push(unary_check("gelu", &[3, 4], 6, |t, v| Ok(t.gelu(v))));
    }
    checks.push(unary_check("relu", &[3, 4], 7, |t, v| {
        let shifted = t.constant(Tensor::from_fn([3, 4], |i| if i % 2 == 0 { 0.25 } else { -0.25 }));
        let x = t.add(v, shifted)?;
        Ok(t.relu(x))
    }));
    checks.push(unary_check("exp", &[2, 3], 8, |t, v| Ok(t.exp(v))));
    checks.push(unary_check("log", &[2, 3], 9, |t, v| {
        let e = t.exp(v);
        t.log(e)
    }));
    checks.push(unary_check("sum/mean", &[2, 5], 10, |t, v| {
        let sq = t.mul(v, v)?;
        let m = t.mean(sq);
        let s = t.sum(v);
        let s = t.scale(s, 0.3);
        t.add(m, s)
    }));
    checks.push(unary_check("reshape/transpose", &[2, 6], 11, |t, v| {
        let r = t.reshape(v, &[3, 4])?;
        t.transpose(r)
    }));
    checks.push(unary_check("slice/concat", &[3, 5], 12, |t, v| {
        let a = t.slice_cols(v, 0, 2)?;
        let b = t.slice_cols(v, 2, 3)?;
        t.concat_cols(&[b, a, b])
    }));
    checks.push(unary_check("patchify", &[2, 4, 4], 13, |t, v| t.patchify(v, 2)));
    checks.push(unary_check("resize_bilinear", &[2, 2, 3], 14, |t, v| t.resize_bilinear(v, 5, 4)));
    checks.push(store_check(
        "layer_norm",
        store_of(&mut rng, &[("x", &[3, 4]), ("gamma", &[4]), ("beta", &[4])]),
        |t, s| {
            let (x, g, b) = (p(t, s, "x"), p(t, s, "gamma"), p(t, s, "beta"));
            let y = t.layer_norm(x, g, b, 1e-6)?;
            weighted_sum(t, y, 15)
        },
    ));
    checks.push(unary_check("cross_entropy", &[4, 3], 16, |t, v| t.cross_entropy(v, &[2, IGNORE_INDEX, 0, 1], IGNORE_INDEX)));

    let mut attn_store = store_of(&mut rng, &[("query", &[3, 4]), ("context", &[4, 4])]);
    let mut arng = ChaCha8Rng::seed_from_u64(17);
    let mha = MultiHeadCrossAttention::new(&mut attn_store, "xattn", 4, 2, false, false, &mut arng).expect("4 divisible by 2");
    checks.push(store_check("cross_attention (2 heads)", attn_store, move |t, s| {
        let (q, c) = (p(t, s, "query"), p(t, s, "context"));
        let y = cross_attention(t, s, q, c, &mha)?;
        weighted_sum(t, y, 18)
    }));
    checks
}

/// Micro configuration of the end-to-end check: 32×32 input, K = 3,
/// C = [4, 8, 16, 32], every stage regularized.
pub fn micro_config() -> SsrConfig {
    SsrConfig {
        stage_mask: StageMask::FULL,
        heads: 1,
        lambda_shadow: 1.0,
        num_classes: 3,
        backbone_channels: [4, 8, 16, 32],
        teacher_channels: 8,
        decoder_dim: 8,
        mlp_ratio: 2,
        image_size: 32,
    }
}

/// Tape vs finite-difference gradients of `combined_loss` for every entry of
/// every parameter of the micro model.
pub fn end_to_end_gradcheck() -> Result<Vec<ParamGradcheck>> {
    let cfg = micro_config();
    let (model, mut store) = SsrModel::new(cfg.clone(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let image = Tensor::from_fn([3, 32, 32], |_| rng.gen_range(0.0..1.0));
    let labels: Vec<usize> = (0..32 * 32).map(|i| if i % 17 == 0 { IGNORE_INDEX } else { (i / 7) % 3 }).collect();
    let teacher = TeacherModel::new(cfg.teacher_channels, 1, 1, 5)?;
    let g = teacher.forward(&image)?;
    let f = |t: &mut Tape, s: &ParamStore| -> Result<Var> {
        let (r, sh) = model.forward_pair(t, s, &image, Some(&g))?;
        combined_loss(t, r, sh, &labels, cfg.lambda_shadow)
    };
    let ids = store.ids();
    gradcheck_params(f, &mut store, &ids, DEFAULT_STEP, usize::MAX)
}

/// Runs every registered check. With `inject_fault`, the GELU check uses a
/// deliberately wrong backward rule and must fail.
///
/// Layer and operation checks use the per-entry relative error. The
/// end-to-end check scores each parameter tensor by the norm-wise relative
/// error over all of its entries.
pub fn run_gradcheck_suite(inject_fault: bool) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for (name, f) in op_checks(inject_fault) {
        checks.push(CheckResult { name, max_rel_error: f()? });
    }
    let e2e = end_to_end_gradcheck()?;
    let worst = e2e.iter().max_by(|a, b| a.norm_error.total_cmp(&b.norm_error)).expect("model has parameters");
    checks.push(CheckResult {
        name: format!(
            "end-to-end micro model ({} tensors, {} entries; worst {})",
            e2e.len(),
            e2e.iter().map(|r| r.entries).sum::<usize>(),
            worst.name
        ),
        max_rel_error: worst.norm_error,
    });
    Ok(GradcheckReport { checks, tolerance: GRADCHECK_TOLERANCE, seconds: start.elapsed().as_secs_f64() })
}
