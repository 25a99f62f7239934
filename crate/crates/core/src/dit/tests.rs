use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::conditioning::{TextEncoder, TEXT_TOKENS};
use crate::numerics::grad_check_coords;

fn small_cfg(mode: InjectionMode) -> ModelConfig {
    ModelConfig {
        model_dim: 24,
        heads: 2,
        blocks: 2,
        ffn_mult: 2,
        text_dim: 8,
        freq_dim: 8,
        injection_mode: mode,
        ..ModelConfig::default()
    }
}

fn latent(frames: usize, h: usize, w: usize, seed: u64) -> LatentVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentVideo::from_fn(frames, 48, h, w, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn bundle(frames: usize, h: usize, w: usize, ids: usize, video: Option<usize>) -> ConditionBundle {
    let enc = TextEncoder::new(3, 8);
    let mut b = ConditionBundle::text_only(enc.encode("a red ball", false), enc.null());
    b.lr_latent = Some(latent(frames, h, w, 100));
    b.id_images = (0..ids).map(|i| latent(1, h, w, 200 + i as u64)).collect();
    b.ref_video = video.map(|k| latent(k, h, w, 300));
    b.noise_aug_step = 300;
    b
}

fn m(t: f64) -> ModulationInput {
    ModulationInput::new(t, 300, 8.0, 1.0).unwrap()
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    assert_eq!(ModelConfig::default().head_dim(), 24);
    let bad = ModelConfig { model_dim: 32, heads: 4, ..ModelConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = ModelConfig { model_dim: 90, heads: 4, ..ModelConfig::default() };
    assert!(bad.validate().is_err());
    assert!(ModulationInput::new(1.5, 0, 8.0, 1.0).is_err());
    assert!(ModulationInput::new(0.5, 1001, 8.0, 1.0).is_err());
}

#[test]
fn rope_zero_positions_is_identity() {
    let x = Tensor::<f64>::from_fn(&[3, 2, 12], |i| (i as f64 * 0.7).sin());
    let y = rope_apply(&x, &[[0, 0, 0]; 3], 10_000.0).unwrap();
    assert_eq!(x.data(), y.data());
    assert!(matches!(rope_apply(&Tensor::<f64>::zeros(&[1, 8]), &[[0, 0, 0]], 10_000.0), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn rope_preserves_norm(seed in any::<u64>(), f in 0usize..50, r in 0usize..16, c in 0usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[1, 24], |_| rng.random_range(-1.0..1.0));
        let y = rope_apply(&x, &[[f, r, c]], 10_000.0).unwrap();
        let n = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((n(&x) - n(&y)).abs() < 1e-6);
    }

    #[test]
    fn rope_logits_depend_on_relative_position(seed in any::<u64>(), delta in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::<f64>::from_fn(&[1, 24], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::<f64>::from_fn(&[1, 24], |_| rng.random_range(-1.0..1.0));
        let (p1, p2) = ([rng.random_range(0..20), 1, 2], [rng.random_range(0..20), 3, 0]);
        let shift = |p: [usize; 3]| [p[0] + delta, p[1], p[2]];
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let base = dot(&rope_apply(&q, &[p1], 10_000.0).unwrap(), &rope_apply(&k, &[p2], 10_000.0).unwrap());
        let moved = dot(&rope_apply(&q, &[shift(p1)], 10_000.0).unwrap(), &rope_apply(&k, &[shift(p2)], 10_000.0).unwrap());
        prop_assert!((base - moved).abs() < 1e-5);
    }
}

#[test]
fn closed_gates_make_blocks_identity() {
    let model = Dit::<f64>::new(small_cfg(InjectionMode::Unified), 5).unwrap();
    let (noisy, b) = (latent(2, 2, 2, 1), bundle(2, 2, 2, 1, Some(2)));
    let layout = model.sequence_layout(&noisy, &b, &ForwardOptions::default()).unwrap();
    let x = Tensor::<f64>::from_fn(&[layout.len(), 24], |i| (i as f64 * 0.31).cos());
    let y = model.block_forward(0, &x, &layout, &b.text, &m(0.4)).unwrap();
    assert_eq!(x.data(), y.data());
}

#[test]
fn output_matches_noisy_shape_for_every_task_and_mode() {
    for mode in [InjectionMode::Unified, InjectionMode::FullChannelConcat, InjectionMode::FullTokenConcat] {
        let model = Dit::<f32>::with_gate_init(small_cfg(mode), 7, Init::Small).unwrap();
        let noisy = latent(3, 2, 2, 2);
        for (ids, video) in [(0, None), (2, None), (0, Some(3)), (1, Some(2))] {
            let b = bundle(3, 2, 2, ids, video);
            let out = model.forward(&noisy, &b, &m(0.5)).unwrap();
            assert_eq!(out.dims(), noisy.dims(), "{mode:?} {ids} {video:?}");
            let layout = model.sequence_layout(&noisy, &b, &ForwardOptions::default()).unwrap();
            let refs: usize = b.reference_lengths().iter().sum();
            let expected = match mode {
                InjectionMode::Unified => (3 + refs) * 4,
                InjectionMode::FullChannelConcat => 3 * 4,
                InjectionMode::FullTokenConcat => (3 + 3 + refs) * 4,
            };
            assert_eq!(layout.len(), expected, "{mode:?}");
        }
    }
}

#[test]
fn missing_lr_and_mismatched_shapes_are_rejected() {
    let model = Dit::<f32>::new(small_cfg(InjectionMode::Unified), 1).unwrap();
    let noisy = latent(2, 2, 2, 1);
    let mut b = bundle(2, 2, 2, 0, None);
    b.lr_latent = None;
    assert!(model.forward(&noisy, &b, &m(0.5)).is_err());
    b.lr_latent = Some(latent(2, 2, 3, 1));
    assert!(matches!(model.forward(&noisy, &b, &m(0.5)), Err(Error::Shape(_))));
    let cc = Dit::<f32>::new(ModelConfig { ref_slots: 1, ..small_cfg(InjectionMode::FullChannelConcat) }, 1).unwrap();
    assert!(cc.forward(&noisy, &bundle(2, 2, 2, 2, None), &m(0.5)).is_err());
}

#[test]
fn base_model_ignores_lr() {
    let cfg = ModelConfig { lr_conditioning: false, ..small_cfg(InjectionMode::Unified) };
    let model = Dit::<f32>::with_gate_init(cfg, 2, Init::Small).unwrap();
    let noisy = latent(2, 2, 2, 4);
    let mut b = bundle(2, 2, 2, 0, None);
    let a = model.forward(&noisy, &b, &m(0.3)).unwrap();
    b.lr_latent = None;
    assert_eq!(a, model.forward(&noisy, &b, &m(0.3)).unwrap());
}

#[test]
fn swapping_id_spans_with_their_ranges_keeps_noisy_outputs() {
    let model = Dit::<f64>::with_gate_init(small_cfg(InjectionMode::Unified), 11, Init::Xavier).unwrap();
    let noisy = latent(2, 2, 2, 9);
    let b = bundle(2, 2, 2, 2, Some(2));
    let plan = RopePlan::from_ranges(2, vec![2..3, 3..4, 4..6]).unwrap();
    let a = model.forward_with(&noisy, &b, &m(0.6), &ForwardOptions { plan: Some(plan), frame_offset: 0 }).unwrap();

    let mut swapped = b.clone();
    swapped.id_images.swap(0, 1);
    let plan = RopePlan::from_ranges(2, vec![3..4, 2..3, 4..6]).unwrap();
    let c = model.forward_with(&noisy, &swapped, &m(0.6), &ForwardOptions { plan: Some(plan), frame_offset: 0 }).unwrap();
    assert!(a.max_abs_diff(&c) < 1e-5, "{}", a.max_abs_diff(&c));

    // without the plan swap the spans land on different frame indices
    let d = model.forward(&noisy, &swapped, &m(0.6)).unwrap();
    assert!(a.max_abs_diff(&d) > 1e-6);
}

#[test]
fn frame_offset_leaves_outputs_unchanged() {
    let model = Dit::<f64>::with_gate_init(small_cfg(InjectionMode::Unified), 12, Init::Xavier).unwrap();
    let noisy = latent(2, 2, 2, 3);
    let b = bundle(2, 2, 2, 1, Some(2));
    let a = model.forward(&noisy, &b, &m(0.2)).unwrap();
    let c = model.forward_with(&noisy, &b, &m(0.2), &ForwardOptions { plan: None, frame_offset: 17 }).unwrap();
    assert!(a.max_abs_diff(&c) < 1e-5, "{}", a.max_abs_diff(&c));
}

#[test]
fn forward_is_deterministic() {
    let model = Dit::<f32>::with_gate_init(small_cfg(InjectionMode::Unified), 4, Init::Small).unwrap();
    let noisy = latent(2, 2, 2, 5);
    let b = bundle(2, 2, 2, 1, None);
    let a = model.forward(&noisy, &b, &m(0.7)).unwrap();
    let c = model.forward(&noisy, &b, &m(0.7)).unwrap();
    assert_eq!(a.data(), c.data());
}

/// MSE between predicted and target velocity tokens through the whole model.
fn mse_through_model<'t>(
    model: &Dit<f64>,
    tape: &'t Tape<f64>,
    flat: Var<'t, f64>,
    noisy: &LatentVideo,
    b: &ConditionBundle,
    target: &Tensor<f64>,
) -> Result<Var<'t, f64>> {
    let p = model.params().bind_flat(flat)?;
    let (pred, _) = model.forward_tape(tape, &p, noisy, b, &m(0.45), &ForwardOptions::default())?;
    pred.sub(tape.constant(target.clone()))?.square()?.mean()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    // two frames of 8x8 pixels -> a 2x2 latent grid
    let model = Dit::<f64>::with_gate_init(small_cfg(InjectionMode::Unified), 21, Init::Xavier).unwrap();
    let noisy = latent(2, 2, 2, 31);
    let b = bundle(2, 2, 2, 1, Some(2));
    let target: Tensor<f64> = tokens_of(&latent(2, 2, 2, 32)).cast();
    let flat = model.params().flatten();

    let mut coords = Vec::new();
    let mut offset = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for t in model.params().tensors() {
        for _ in 0..2 {
            coords.push(offset + rng.random_range(0..t.numel()));
        }
        offset += t.numel();
    }
    let report = grad_check_coords(
        |tape, x| mse_through_model(&model, tape, x, &noisy, &b, &target),
        &flat,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.max_abs_rel_error < 1e-3, "{report:?}");
    assert_eq!(report.checked, coords.len());
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = Dit::<f32>::with_gate_init(small_cfg(InjectionMode::FullTokenConcat), 8, Init::Small).unwrap();
    model.save(dir.path()).unwrap();
    let back = Dit::<f32>::load(dir.path()).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.config(), model.config());
    assert!(matches!(Dit::<f32>::load(&dir.path().join("nope")), Err(Error::Missing(_))));
}

#[test]
fn text_shape_is_checked() {
    let model = Dit::<f32>::new(small_cfg(InjectionMode::Unified), 1).unwrap();
    let mut b = bundle(2, 2, 2, 0, None);
    b.text = Tensor::zeros(&[TEXT_TOKENS, 9]);
    assert!(matches!(model.forward(&latent(2, 2, 2, 1), &b, &m(0.5)), Err(Error::Shape(_))));
}
