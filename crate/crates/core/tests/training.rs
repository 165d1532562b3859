use modelguard_core::nn::Network;
use modelguard_core::train::{objective, RegularizerHook, Trainer};
use modelguard_core::watermark::{plan_spec, WatermarkRegularizer};
use modelguard_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(n: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * 784).map(|_| rng.random::<f32>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
    ImageBatch::new(pixels, labels, (28, 28, 1), 10).unwrap()
}

fn wm_hook<T: Real>(model: &Network<T>, lambda: f64) -> RegularizerHook {
    let plan = WatermarkPlan {
        layer: DEFAULT_WATERMARK_LAYER.into(),
        digits: WM1.to_vec(),
        lambda,
        seed: 5,
        range: MapRange::default(),
        reference_range: None,
    };
    WatermarkRegularizer::new(model, &plan_spec(model, &plan).unwrap())
        .unwrap()
        .hook()
}

/// Central differences in f64 on the full objective, including the
/// watermark term, at random weights and at every watermarked position.
#[test]
fn backprop_matches_finite_differences() {
    let model: Network<f64> = build_lenet5(10, 21).unwrap().cast();
    let data = random_batch(3, 2);
    let x: Vec<f64> = data.pixels().iter().map(|&p| f64::from(p)).collect();
    // A large strength makes the penalty gradient comparable to the data term.
    let mut hook = wm_hook(&model, 1.0);
    hook.strength = 1.0;
    let out = objective(&model, &x, data.labels(), Some(&hook));
    assert!(out.penalty > 0.0);

    let slot = model.param_slot(DEFAULT_WATERMARK_LAYER).unwrap();
    let mut probes: Vec<(usize, usize)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..16 {
        let layer = rng.random_range(0..model.param_layers().len());
        let idx = rng.random_range(0..model.params()[layer].0.len());
        probes.push((layer, idx));
    }
    let conv = model.conv(DEFAULT_WATERMARK_LAYER).unwrap();
    let (component, _) = watermark::select_target_component(conv);
    for p in watermark::select_positions(conv.weight.len() / conv.out_channels, 13, 5).unwrap() {
        probes.push((
            slot,
            watermark::tensor_index(conv.out_channels, component, p),
        ));
    }

    let h = 1e-6;
    let mut checked = 0;
    for (layer, idx) in probes {
        let loss_at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut()[layer].0[idx] += delta;
            objective(&m, &x, data.labels(), Some(&hook)).loss
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let an = out.gradients.weights[layer][idx];
        let scale = fd.abs().max(an.abs());
        if scale < 1e-7 {
            continue;
        }
        assert!(
            (fd - an).abs() <= 1e-3 * scale,
            "layer {layer} idx {idx}: analytic {an} vs numeric {fd}"
        );
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} informative probes");
}

#[test]
fn bias_gradients_match_finite_differences() {
    let model: Network<f64> = build_lenet5(10, 3).unwrap().cast();
    let data = random_batch(2, 8);
    let x: Vec<f64> = data.pixels().iter().map(|&p| f64::from(p)).collect();
    let out = objective(&model, &x, data.labels(), None);
    let h = 1e-6;
    for layer in 0..model.param_layers().len() {
        let loss_at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut()[layer].1[0] += delta;
            objective(&m, &x, data.labels(), None).loss
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let an = out.gradients.biases[layer][0];
        assert!(
            (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6),
            "layer {layer}: {an} vs {fd}"
        );
    }
}

#[test]
fn zero_strength_leaves_objective_unchanged() {
    let model = build_lenet5(10, 1).unwrap();
    let data = random_batch(8, 3);
    let hook = wm_hook(&model, 0.0);
    let plain = objective(&model, data.pixels(), data.labels(), None);
    let hooked = objective(&model, data.pixels(), data.labels(), Some(&hook));
    assert_eq!(plain.loss, hooked.loss);
    assert_eq!(plain.gradients, hooked.gradients);
}

#[test]
fn zero_strength_hook_gives_identical_training() {
    let data = random_batch(96, 4);
    let mut a = build_lenet5(10, 2).unwrap();
    let mut b = a.clone();
    let hook = wm_hook(&a, 0.0);
    train(&mut a, &data, &TrainConfig::adam(2, 1e-3, 7)).unwrap();
    train(
        &mut b,
        &data,
        &TrainConfig::adam(2, 1e-3, 7).with_regularizer(hook),
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn untrained_models_score_near_chance() {
    let data = random_batch(500, 11);
    let mean: f64 = (0..8)
        .map(|s| evaluate(&build_lenet5(10, 100 + s).unwrap(), &data).unwrap())
        .sum::<f64>()
        / 8.0;
    assert!((mean - 0.1).abs() < 0.04, "mean untrained accuracy {mean}");
}

#[test]
fn separable_toy_set_is_learned_perfectly() {
    // Class 0: dark left half, class 1: dark right half.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 64;
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        for _r in 0..28 {
            for c in 0..28 {
                let bright = (c < 14) == (label == 1);
                let base = if bright { 0.8 } else { 0.1 };
                pixels.push(base + rng.random::<f32>() * 0.1);
            }
        }
        labels.push(label);
    }
    let data = ImageBatch::new(pixels, labels, (28, 28, 1), 10).unwrap();
    let mut model = build_lenet5(10, 6).unwrap();
    let report = train(&mut model, &data, &TrainConfig::adam(5, 1e-3, 1)).unwrap();
    assert_eq!(evaluate(&model, &data).unwrap(), 1.0, "{report:?}");
}

#[test]
fn trainer_reports_each_epoch() {
    let data = random_batch(64, 12);
    let mut model = build_lenet5(10, 2).unwrap();
    let mut trainer = Trainer::new(&model, TrainConfig::momentum(2, 0.01, 3)).unwrap();
    trainer.run_epoch(&mut model, &data).unwrap();
    trainer.run_epoch(&mut model, &data).unwrap();
    assert_eq!(trainer.epochs_done(), 2);
    assert_eq!(trainer.report().loss_history.len(), 2);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = random_batch(4, 1);
    let mut model = build_lenet5(10, 2).unwrap();
    let mut cfg = TrainConfig::adam(1, 1e-3, 0);
    cfg.batch_size = 0;
    assert!(matches!(
        train(&mut model, &data, &cfg),
        Err(Error::Precondition(_))
    ));
    let cfg = TrainConfig::adam(1, -1.0, 0);
    assert!(train(&mut model, &data, &cfg).is_err());
}
