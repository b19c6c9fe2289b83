use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssr_core::autodiff::Tape;
use ssr_core::model::{segmentation_loss, BaselineModel, Segmenter, SsrConfig, SsrModel, StageMask};
use ssr_core::optim::{Algorithm, Optimizer};
use ssr_core::teacher::TeacherModel;
use ssr_core::tensor::Tensor;

fn image(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, size, size], |_| rng.gen_range(0.0..1.0))
}

fn config(mask: StageMask) -> SsrConfig {
    SsrConfig { stage_mask: mask, ..SsrConfig::default() }
}

fn shadow_logits<M: Segmenter>(model: &M, store: &ssr_core::params::ParamStore, img: &Tensor) -> Tensor {
    let mut tape = Tape::no_grad();
    let v = model.forward_shadow(&mut tape, store, img).unwrap();
    tape.value(v).clone()
}

#[test]
fn zeroed_output_projections_make_regularized_equal_shadow() {
    let (model, mut store) = SsrModel::new(config(StageMask::FULL), 11).unwrap();
    for reg in model.regularizers.iter().flatten() {
        let wo = store.get_mut(reg.xattn.wo.w);
        wo.value = Tensor::zeros(wo.value.shape().to_vec());
    }
    let img = image(1, 64);
    let g = TeacherModel::new(32, 1, 1, 11).unwrap().forward(&img).unwrap();

    let mut tape = Tape::no_grad();
    let reg = model.forward_regularized(&mut tape, &store, &img, Some(&g)).unwrap();
    let shadow = shadow_logits(&model, &store, &img);
    let diff = tape.value(reg).max_abs_diff(&shadow);
    assert!(diff <= 1e-9, "max logit difference {diff:e}");
    assert!(tape.value(reg).bit_eq(&shadow));
}

#[test]
fn shadow_path_ignores_regularizer_parameters() {
    let (model, mut store) = SsrModel::new(config(StageMask::FULL), 5).unwrap();
    let img = image(2, 64);
    let before = shadow_logits(&model, &store, &img);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ssr_ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with("ssr.")).map(|(id, _)| id).collect();
    assert!(!ssr_ids.is_empty());
    for id in ssr_ids {
        let p = store.get_mut(id);
        p.value = Tensor::from_fn(p.value.shape().to_vec(), |_| rng.gen_range(-5.0..5.0));
    }
    let after = shadow_logits(&model, &store, &img);
    assert!(before.bit_eq(&after));
}

/// Hand-summed parameter count from the declared layer shapes.
fn shape_walk_oracle(c: [usize; 4], e: usize, k: usize, mlp: usize) -> usize {
    let mut total = 0;
    let mut in_ch = 3;
    for (i, &ci) in c.iter().enumerate() {
        let patch = if i == 0 { 4 } else { 2 };
        let embed = in_ch * patch * patch * ci + ci;
        let norm = 2 * ci;
        let attn = 4 * ci * ci;
        let ffn = (ci * mlp * ci + mlp * ci) + (mlp * ci * ci + ci);
        total += embed + norm + (2 * ci + attn + 2 * ci + ffn);
        in_ch = ci;
    }
    let proj: usize = c.iter().map(|&ci| ci * e + e).sum();
    total + proj + (4 * e * e + e) + (e * k + k)
}

#[test]
fn inference_param_count_matches_oracle_for_every_mask() {
    let oracle = shape_walk_oracle([16, 32, 64, 128], 64, 4, 2);
    for mask in StageMask::ablation_grid() {
        let (model, store) = SsrModel::new(config(mask), 0).unwrap();
        assert_eq!(model.inference_param_count(), oracle, "mask {mask}");
        let ssr: usize = store.iter().filter(|(_, p)| p.name.starts_with("ssr.")).map(|(_, p)| p.value.numel()).sum();
        assert_eq!(model.inference_param_count(), model.total_param_count() - ssr);
        assert_eq!(store.total_count(), model.total_param_count());
    }
    let (baseline, _) = BaselineModel::new(config(StageMask::EMPTY), 0).unwrap();
    assert_eq!(baseline.inference_param_count(), oracle);
}

#[test]
fn shadow_equals_transplanted_baseline() {
    let (model, mut store) = SsrModel::new(config(StageMask::FULL), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for id in store.ids() {
        let p = store.get_mut(id);
        p.value = Tensor::from_fn(p.value.shape().to_vec(), |_| rng.gen_range(-0.3..0.3));
    }
    // A baseline from a different seed, overwritten tensor by tensor.
    let (baseline, mut bstore) = BaselineModel::new(config(StageMask::EMPTY), 77).unwrap();
    for id in bstore.ids() {
        let name = bstore.get(id).name.clone();
        bstore.get_mut(id).value = store.by_name(&name).expect("shared parameter").value.clone();
    }
    let img = image(5, 64);
    assert!(shadow_logits(&model, &store, &img).bit_eq(&shadow_logits(&baseline, &bstore, &img)));
}

#[test]
fn shared_weights_receive_gradient_from_regularized_branch() {
    let (model, mut store) = SsrModel::new(config(StageMask::FULL), 8).unwrap();
    let img = image(6, 64);
    let labels: Vec<usize> = (0..64 * 64).map(|i| (i / 64 / 16) % 4).collect();
    let g = TeacherModel::new(32, 1, 1, 8).unwrap().forward(&img).unwrap();
    let before = shadow_logits(&model, &store, &img);

    let mut tape = Tape::new();
    let (reg, _shadow) = model.forward_pair(&mut tape, &store, &img, Some(&g)).unwrap();
    let loss = segmentation_loss(&mut tape, reg, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    grads.accumulate_into(&mut store);
    let embed = store.by_name("backbone.stage0.embed.w").unwrap();
    assert!(embed.grad.as_ref().unwrap().data().iter().any(|&x| x != 0.0));

    let mut opt = Optimizer::new(&store, Algorithm::adam(), 1e-3);
    opt.step(&mut store).unwrap();
    let after = shadow_logits(&model, &store, &img);
    assert!(!before.bit_eq(&after));
}

#[test]
fn backbone_and_decoder_are_registered_once() {
    let (_, store) = SsrModel::new(config(StageMask::FULL), 0).unwrap();
    let mut names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
    let n = names.len();
    names.dedup();
    assert_eq!(names.len(), n);
    assert!(names.iter().all(|n| n.starts_with("backbone.") || n.starts_with("decoder.") || n.starts_with("ssr.")));
}

#[test]
fn teacher_never_receives_gradients() {
    let (model, mut store) = SsrModel::new(config(StageMask::FULL), 2).unwrap();
    let teacher = TeacherModel::new(32, 1, 1, 2).unwrap();
    let before = teacher.checksum();
    let img = image(7, 64);
    let labels = vec![1usize; 64 * 64];
    let g = teacher.forward(&img).unwrap();

    let mut tape = Tape::new();
    let (reg, shadow) = model.forward_pair(&mut tape, &store, &img, Some(&g)).unwrap();
    let loss = ssr_core::model::combined_loss(&mut tape, reg, shadow, &labels, 1.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    grads.accumulate_into(&mut store);
    let mut opt = Optimizer::new(&store, Algorithm::adam(), 1e-2);
    opt.step(&mut store).unwrap();

    assert!(store.iter().all(|(_, p)| !p.name.starts_with("teacher.")));
    assert!(teacher.params().iter().all(|(_, p)| p.frozen && p.grad.is_none()));
    assert_eq!(teacher.checksum(), before);
}

#[test]
fn regularizing_only_stage_three_leaves_shadow_maps_intact() {
    let (model, store) = SsrModel::new(config(StageMask::parse("3").unwrap()), 1).unwrap();
    let img = image(8, 64);
    let g = TeacherModel::new(32, 1, 1, 1).unwrap().forward(&img).unwrap();
    let mut tape = Tape::no_grad();
    let x = tape.constant(img.clone());
    let feats = model.backbone.encode(&mut tape, &store, x).unwrap();
    let reg = model.regularized_features(&mut tape, &store, &feats, Some(&g)).unwrap();
    for i in 0..3 {
        assert!(tape.value(reg.maps[i]).bit_eq(tape.value(feats.maps[i])), "stage {i}");
    }
    assert!(!tape.value(reg.maps[3]).bit_eq(tape.value(feats.maps[3])));
}
