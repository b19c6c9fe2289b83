//! Layers built on the tape: linear, layer norm, multi-head (cross-)attention,
//! the pointwise feed-forward and the pre-norm mixing block used by both encoders.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: usize = 255;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `x · W (+ b)` for `x: [N×d_in]`, `W: [d_in×d_out]`, `b: [d_out]`.
pub fn linear_forward(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

pub fn layernorm_forward(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    tape.layer_norm(x, gamma, beta, eps)
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], ignore_index: usize) -> Result<Var> {
    tape.cross_entropy(logits, labels, ignore_index)
}

/// `[C×H×W]` feature map to `[H·W × C]` tokens, row-major over `(H, W)`.
pub fn map_to_tokens(tape: &mut Tape, map: Var) -> Result<Var> {
    let (c, h, w) = tape.value(map).dims3()?;
    let flat = tape.reshape(map, &[c, h * w])?;
    tape.transpose(flat)
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(tape: &mut Tape, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let (n, c) = tape.value(tokens).dims2()?;
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens cannot form a {h}x{w} map")));
    }
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[c, h, w])
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.register_uniform(format!("{prefix}.w"), &[d_in, d_out], d_in, rng, frozen)?;
        let b = if bias {
            Some(store.register_uniform(format!("{prefix}.b"), &[d_out], d_in, rng, frozen)?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        linear_forward(tape, x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, frozen: bool) -> Result<Self> {
        use crate::tensor::Tensor;
        let gamma = store.register(format!("{prefix}.gamma"), Tensor::ones([dim]), frozen)?;
        let beta = store.register(format!("{prefix}.beta"), Tensor::zeros([dim]), frozen)?;
        Ok(Self { gamma, beta, dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        layernorm_forward(tape, x, g, b, LAYER_NORM_EPS)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Multi-head attention with learned `Wq`, `Wk`, `Wv`, `Wo` (all `[C×C]`).
/// Queries come from one token set, keys and values from another; passing the
/// same tokens twice gives ordinary self-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadCrossAttention {
    pub heads: usize,
    pub dim: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadCrossAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        bias: bool,
        frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} is not divisible by {heads} heads"
            )));
        }
        let mut lin = |name: &str| Linear::new(store, &format!("{prefix}.{name}"), dim, dim, bias, frozen, rng);
        Ok(Self { heads, dim, wq: lin("wq")?, wk: lin("wk")?, wv: lin("wv")?, wo: lin("wo")? })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query_in: Var, context: Var) -> Result<Var> {
        cross_attention(tape, store, query_in, context, self)
    }

    pub fn param_count(&self) -> usize {
        self.wq.param_count() + self.wk.param_count() + self.wv.param_count() + self.wo.param_count()
    }
}

/// `concat_h(softmax(Q_h K_hᵀ / √d_h) V_h) · Wo` with `Q = query_in·Wq`,
/// `K = context·Wk`, `V = context·Wv`. Query and context token counts may differ.
pub fn cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    query_in: Var,
    context: Var,
    mha: &MultiHeadCrossAttention,
) -> Result<Var> {
    let (_, cq) = tape.value(query_in).dims2()?;
    let (_, ck) = tape.value(context).dims2()?;
    if cq != mha.dim || ck != mha.dim {
        return Err(Error::shape(format!(
            "cross_attention: query {:?} and context {:?} must both have {} channels",
            tape.shape(query_in),
            tape.shape(context),
            mha.dim
        )));
    }
    let q = mha.wq.forward(tape, store, query_in)?;
    let k = mha.wk.forward(tape, store, context)?;
    let v = mha.wv.forward(tape, store, context)?;
    let dh = mha.dim / mha.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(mha.heads);
    for h in 0..mha.heads {
        let (qh, kh, vh) = if mha.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_lastdim(scores)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    mha.wo.forward(tape, store, merged)
}

/// `Linear(C → rC) → GELU → Linear(rC → C)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, hidden, true, frozen, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, dim, true, frozen, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct MixingBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadCrossAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl MixingBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), dim, frozen)?,
            attn: MultiHeadCrossAttention::new(store, &format!("{prefix}.attn"), dim, heads, false, frozen, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), dim, frozen)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), dim, dim * mlp_ratio, frozen, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(x, f)
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count() + self.attn.param_count() + self.norm2.param_count() + self.ffn.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        store.get_mut(id).value = t;
    }

    fn identity(n: usize) -> Tensor {
        Tensor::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn linear_examples() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 2, 2, false, false, &mut rng).unwrap();
        set(&mut store, lin.w, identity(2));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.5, -2.0], &[0.0, 3.0]]));
        let y = lin.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        set(&mut store, lin.w, Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 1.0]]));
        let y = lin.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);

        let biased = Linear::new(&mut store, "b", 2, 2, true, false, &mut rng).unwrap();
        set(&mut store, biased.b.unwrap(), Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let x = tape.constant(Tensor::zeros([3, 2]));
        let y = biased.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 3, 2, true, false, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 2]));
        assert!(matches!(lin.forward(&mut tape, &store, x), Err(Error::Shape(_))));
    }

    #[test]
    fn layernorm_examples() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "n", 2, false).unwrap();
        let mut tape = Tape::new();
        let g = tape.param(&store, ln.gamma);
        let b = tape.param(&store, ln.beta);
        let x = tape.constant(Tensor::from_rows(&[&[4.0, 4.0], &[1.0, 3.0]]));
        let y = layernorm_forward(&mut tape, x, g, b, 1e-15).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-12 && (d[3] - 1.0).abs() < 1e-12);

        let zero_gamma = tape.constant(Tensor::zeros([2]));
        let beta = tape.constant(Tensor::new([2], vec![0.5, -0.5]).unwrap());
        let y = layernorm_forward(&mut tape, x, zero_gamma, beta, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = MultiHeadCrossAttention::new(&mut store, "a", 6, 4, false, false, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn attention_rejects_channel_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadCrossAttention::new(&mut store, "a", 4, 2, false, false, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros([3, 4]));
        let c = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(mha.forward(&mut tape, &store, q, c), Err(Error::Shape(_))));
    }

    #[test]
    fn single_key_output_ignores_query() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadCrossAttention::new(&mut store, "a", 4, 2, false, false, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ctx = tape.constant(Tensor::from_fn([1, 4], |i| 0.3 * i as f64 - 0.4));
        let q1 = tape.constant(Tensor::from_fn([3, 4], |i| (i as f64).sin()));
        let q2 = tape.constant(Tensor::from_fn([3, 4], |i| 5.0 * (i as f64).cos()));
        let y1 = mha.forward(&mut tape, &store, q1, ctx).unwrap();
        let y2 = mha.forward(&mut tape, &store, q2, ctx).unwrap();
        assert!(tape.value(y1).max_abs_diff(tape.value(y2)) <= 1e-9);
        // Every row equals (v·Wv)·Wo.
        let v = mha.wv.forward(&mut tape, &store, ctx).unwrap();
        let expect = mha.wo.forward(&mut tape, &store, v).unwrap();
        let e = tape.value(expect).data().to_vec();
        for row in tape.value(y1).data().chunks(4) {
            for (a, b) in row.iter().zip(&e) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identical_context_rows_give_identical_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadCrossAttention::new(&mut store, "a", 4, 1, false, false, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ctx = tape.constant(Tensor::from_fn([5, 4], |i| [0.2, -0.1, 0.7, 0.4][i % 4]));
        let q = tape.constant(Tensor::from_fn([3, 4], |i| (i as f64 * 0.37).sin()));
        let y = mha.forward(&mut tape, &store, q, ctx).unwrap();
        let d = tape.value(y).data();
        for r in 1..3 {
            for c in 0..4 {
                assert!((d[r * 4 + c] - d[c]).abs() < 1e-12);
            }
        }
    }

    /// Dense-loop oracle for single-head attention, independent of the tape.
    fn attention_oracle(q_in: &[Vec<f64>], ctx: &[Vec<f64>], wq: &[Vec<f64>], wk: &[Vec<f64>], wv: &[Vec<f64>], wo: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let proj = |x: &[Vec<f64>], w: &[Vec<f64>]| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| (0..w[0].len()).map(|j| (0..row.len()).map(|t| row[t] * w[t][j]).sum()).collect())
                .collect()
        };
        let (q, k, v) = (proj(q_in, wq), proj(ctx, wk), proj(ctx, wv));
        let c = q[0].len() as f64;
        let mut out = Vec::new();
        for qi in &q {
            let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / c.sqrt()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let a: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            let mixed: Vec<f64> = (0..v[0].len()).map(|d| a.iter().zip(&v).map(|(w, vj)| w * vj[d]).sum()).collect();
            out.push(mixed);
        }
        proj(&out, wo)
    }

    #[test]
    fn single_head_matches_dense_loop_oracle() {
        let wq = vec![vec![0.5, -0.2], vec![0.1, 0.3]];
        let wk = vec![vec![0.4, 0.0], vec![-0.3, 0.2]];
        let wv = vec![vec![1.0, 0.5], vec![-0.5, 0.25]];
        let wo = vec![vec![0.2, 0.1], vec![0.0, -0.6]];
        let q_in = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let ctx = vec![vec![0.3, -0.7], vec![1.2, 0.4], vec![-0.5, -0.5]];
        let expect = attention_oracle(&q_in, &ctx, &wq, &wk, &wv, &wo);

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadCrossAttention::new(&mut store, "a", 2, 1, false, false, &mut rng).unwrap();
        let lit = |m: &[Vec<f64>]| Tensor::new([m.len(), m[0].len()], m.concat()).unwrap();
        set(&mut store, mha.wq.w, lit(&wq));
        set(&mut store, mha.wk.w, lit(&wk));
        set(&mut store, mha.wv.w, lit(&wv));
        set(&mut store, mha.wo.w, lit(&wo));
        let mut tape = Tape::new();
        let q = tape.constant(lit(&q_in));
        let c = tape.constant(lit(&ctx));
        let y = mha.forward(&mut tape, &store, q, c).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
        for (got, want) in tape.value(y).data().iter().zip(expect.concat()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn tokens_round_trip_through_map() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::from_fn([3, 2, 4], |i| i as f64));
        let t = map_to_tokens(&mut tape, m).unwrap();
        assert_eq!(tape.shape(t), &[8, 3]);
        // Token 1 is pixel (0, 1): channel values 1, 9, 17.
        assert_eq!(&tape.value(t).data()[3..6], &[1.0, 9.0, 17.0]);
        let back = tokens_to_map(&mut tape, t, 2, 4).unwrap();
        assert!(tape.value(back).bit_eq(tape.value(m)));
    }
}
