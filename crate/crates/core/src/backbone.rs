//! Four-stage hierarchical encoder producing feature maps at strides 4, 8, 16 and 32.
//!
//! Each stage is a non-overlapping patch embedding (4×4 at stage 0, 2×2 after),
//! a layer norm and one pre-norm mixing block over the stage's tokens.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{tokens_to_map, LayerNorm, Linear, MixingBlock};
use crate::params::ParamStore;

pub const NUM_STAGES: usize = 4;
pub const STAGE_STRIDES: [usize; NUM_STAGES] = [4, 8, 16, 32];
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug)]
pub struct PyramidStage {
    pub patch: usize,
    pub dim: usize,
    pub embed: Linear,
    pub norm: LayerNorm,
    pub block: MixingBlock,
}

#[derive(Clone, Debug)]
pub struct PyramidEncoder {
    pub stages: Vec<PyramidStage>,
}

/// The four backbone maps `F0..F3`, each `[C_i × H/s_i × W/s_i]`.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub maps: [Var; NUM_STAGES],
}

impl PyramidEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        channels: [usize; NUM_STAGES],
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_ch = IMAGE_CHANNELS;
        for (i, &dim) in channels.iter().enumerate() {
            let patch = if i == 0 { 4 } else { 2 };
            let prefix = format!("backbone.stage{i}");
            let embed = Linear::new(store, &format!("{prefix}.embed"), in_ch * patch * patch, dim, true, false, rng)?;
            let norm = LayerNorm::new(store, &format!("{prefix}.norm"), dim, false)?;
            let block = MixingBlock::new(store, &format!("{prefix}.block"), dim, heads, mlp_ratio, false, rng)?;
            stages.push(PyramidStage { patch, dim, embed, norm, block });
            in_ch = dim;
        }
        Ok(Self { stages })
    }

    pub fn channels(&self) -> [usize; NUM_STAGES] {
        std::array::from_fn(|i| self.stages[i].dim)
    }

    /// Runs all four stages on a `[3×H×W]` image; `H` and `W` must be multiples of 32.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<StageFeatures> {
        let (c, h, w) = tape.value(image).dims3()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::shape(format!("expected a 3-channel image, got shape {:?}", tape.shape(image))));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "image size {h}x{w} must be divisible by 32 (four stages, total stride 32)"
            )));
        }
        let mut map = image;
        let mut maps = Vec::with_capacity(NUM_STAGES);
        let (mut sh, mut sw) = (h, w);
        for stage in &self.stages {
            sh /= stage.patch;
            sw /= stage.patch;
            let tokens = tape.patchify(map, stage.patch)?;
            let x = stage.embed.forward(tape, store, tokens)?;
            let x = stage.norm.forward(tape, store, x)?;
            let x = stage.block.forward(tape, store, x)?;
            map = tokens_to_map(tape, x, sh, sw)?;
            maps.push(map);
        }
        Ok(StageFeatures { maps: [maps[0], maps[1], maps[2], maps[3]] })
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.embed.param_count() + s.norm.param_count() + s.block.param_count())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(seed: u64, channels: [usize; 4]) -> (PyramidEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = PyramidEncoder::new(&mut store, channels, 1, 2, &mut rng).unwrap();
        (enc, store)
    }

    #[test]
    fn stage_shapes_for_64px() {
        let (enc, store) = build(0, [16, 32, 64, 128]);
        let mut tape = Tape::no_grad();
        let img = tape.constant(Tensor::from_fn([3, 64, 64], |i| ((i * 7919) % 255) as f64 / 255.0));
        let f = enc.encode(&mut tape, &store, img).unwrap();
        let shapes: Vec<_> = f.maps.iter().map(|m| tape.shape(*m).to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 16, 16], vec![32, 8, 8], vec![64, 4, 4], vec![128, 2, 2]]);
    }

    #[test]
    fn zero_image_is_finite_and_deterministic() {
        let (enc, store) = build(3, [8, 8, 8, 8]);
        let run = || {
            let mut tape = Tape::no_grad();
            let img = tape.constant(Tensor::zeros([3, 32, 32]));
            let f = enc.encode(&mut tape, &store, img).unwrap();
            f.maps.map(|m| tape.value(m).clone())
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert!(x.is_finite());
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn same_seed_constructions_are_bit_identical() {
        let img = Tensor::from_fn([3, 32, 32], |i| (i as f64 * 0.013).sin());
        let outs: Vec<_> = (0..2)
            .map(|_| {
                let (enc, store) = build(11, [4, 8, 16, 32]);
                let mut tape = Tape::no_grad();
                let v = tape.constant(img.clone());
                let f = enc.encode(&mut tape, &store, v).unwrap();
                f.maps.map(|m| tape.value(m).clone())
            })
            .collect();
        for (x, y) in outs[0].iter().zip(&outs[1]) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let (enc, store) = build(0, [4, 8, 16, 32]);
        let mut tape = Tape::no_grad();
        let img = tape.constant(Tensor::zeros([3, 48, 40]));
        let msg = enc.encode(&mut tape, &store, img).unwrap_err().to_string();
        assert!(msg.contains("divisible by 32"), "{msg}");
    }

    #[test]
    fn every_parameter_is_under_backbone_prefix() {
        let (enc, store) = build(0, [4, 8, 16, 32]);
        assert!(store.iter().all(|(_, p)| p.name.starts_with("backbone.")));
        assert_eq!(store.total_count(), enc.param_count());
    }
}
