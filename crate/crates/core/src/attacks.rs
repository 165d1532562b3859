//! Attacks against a protected model: fingerprint forgery, fine-tuning and
//! magnitude pruning.

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auth::{admit, gate};
use crate::cw::{self, CwParams, CwTarget};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::fingerprint::AuthPolicy;
use crate::nn::{cross_entropy, Classifier};
use crate::train::{evaluate, probabilities_all, TrainConfig, Trainer};
use crate::watermark::{extract, WatermarkSpec};

/// One row of the attack bench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub params: String,
    /// Test accuracy after the attack (absent for forgery, which leaves the
    /// model untouched).
    pub accuracy: Option<f64>,
    pub wm_matched: Option<bool>,
    pub forgery_rate: Option<f64>,
    pub seed: u64,
}

/// How forged fingerprint candidates are crafted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum ForgeryMethod {
    /// Raw test images.
    Clean,
    /// One signed-gradient step of size `eps` away from the true label.
    Fgsm { eps: f64 },
    /// Plain targeted C&W towards a random wrong class, no confidence pin.
    Cw {
        learning_rate: f64,
        max_iterations: usize,
        search_steps: usize,
    },
}

impl ForgeryMethod {
    pub const MNIST_FGSM_EPS: f64 = 0.1;
    pub const CIFAR_FGSM_EPS: f64 = 8.0 / 255.0;

    pub fn fgsm() -> Self {
        ForgeryMethod::Fgsm {
            eps: Self::MNIST_FGSM_EPS,
        }
    }

    pub fn cw() -> Self {
        ForgeryMethod::Cw {
            learning_rate: 0.01,
            max_iterations: 200,
            search_steps: 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ForgeryMethod::Clean => "clean",
            ForgeryMethod::Fgsm { .. } => "fgsm",
            ForgeryMethod::Cw { .. } => "cw",
        }
    }

    fn describe(&self) -> String {
        match self {
            ForgeryMethod::Clean => "method=clean".into(),
            ForgeryMethod::Fgsm { eps } => format!("method=fgsm;eps={eps}"),
            ForgeryMethod::Cw {
                learning_rate,
                max_iterations,
                search_steps,
            } => {
                format!("method=cw;lr={learning_rate};iters={max_iterations};steps={search_steps}")
            }
        }
    }
}

/// Single-step FGSM on a whole batch: `clip(x + eps·sign(∇x CE))`.
pub fn fgsm(model: &Classifier, images: &ImageBatch, eps: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(images.pixels().len());
    let d = images.image_len();
    for chunk in (0..images.len()).collect::<Vec<_>>().chunks(256) {
        let part = images.select(chunk);
        let trace = model.forward_trace(part.pixels(), part.len());
        let (_, dlogits) = cross_entropy(&trace.logits, part.labels(), model.classes());
        let gx = model
            .backward(&trace, &dlogits, None, true)
            .expect("input gradient requested");
        let step = eps as f32;
        out.extend(part.pixels().iter().zip(&gx).map(|(&x, &g)| {
            let s = if g > 0.0 {
                step
            } else if g < 0.0 {
                -step
            } else {
                0.0
            };
            (x + s).clamp(0.0, 1.0)
        }));
        debug_assert_eq!(out.len() % d, 0);
    }
    out
}

fn forge_cw(
    model: &Classifier,
    images: &ImageBatch,
    params: &CwParams,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let k = model.classes();
    let d = images.image_len();
    let targets: Vec<usize> = (0..images.len())
        .map(|i| {
            let t = rng.random_range(0..k - 1);
            if t >= images.label(i) {
                t + 1
            } else {
                t
            }
        })
        .collect();
    let mut out = images.pixels().to_vec();
    for t in 0..k {
        let members: Vec<usize> = (0..images.len()).filter(|&i| targets[i] == t).collect();
        for group in members.chunks(100) {
            let seeds: Vec<&[f32]> = group.iter().map(|&i| images.image(i)).collect();
            let outcomes = cw::search(
                model,
                &seeds,
                CwTarget {
                    class: t,
                    pin: None,
                    spread: false,
                },
                params,
            );
            for (&i, o) in group.iter().zip(outcomes) {
                out[i * d..(i + 1) * d].copy_from_slice(&o.image);
            }
        }
    }
    out
}

/// Crafts `budget` forged fingerprints from randomly chosen test images and
/// reports the fraction the control layer admits.
pub fn forgery_attack(
    model: &Classifier,
    policy: &AuthPolicy,
    test: &ImageBatch,
    method: ForgeryMethod,
    budget: usize,
    seed: u64,
) -> Result<AttackReport> {
    if budget == 0 || budget > test.len() {
        return Err(Error::Precondition(format!(
            "forgery budget must be in 1..={}, got {budget}",
            test.len()
        )));
    }
    if let ForgeryMethod::Fgsm { eps } = method {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::Precondition(format!(
                "FGSM eps must be in (0, 1], got {eps}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, test.len(), budget).into_vec();
    let chosen = test.select(&picks);
    let forged = match method {
        ForgeryMethod::Clean => chosen.pixels().to_vec(),
        ForgeryMethod::Fgsm { eps } => fgsm(model, &chosen, eps),
        ForgeryMethod::Cw {
            learning_rate,
            max_iterations,
            search_steps,
        } => {
            let params = CwParams {
                learning_rate,
                alpha_lo: 0.0,
                alpha_hi: 40.0,
                initial_alpha: 20.0,
                max_iterations,
                search_steps,
                abort_early: true,
            };
            forge_cw(model, &chosen, &params, &mut rng)
        }
    };
    let d = chosen.image_len();
    let admitted = forged
        .chunks(d)
        .filter(|x| gate(model, x, policy, &mut rng).is_authorized())
        .count();
    let rate = admitted as f64 / budget as f64;
    log::info!("forgery {}: {admitted}/{budget} admitted", method.name());
    Ok(AttackReport {
        attack: "forgery".into(),
        params: format!("{};budget={budget}", method.describe()),
        accuracy: None,
        wm_matched: None,
        forgery_rate: Some(rate),
        seed,
    })
}

/// Fraction of images whose top-1 confidence already passes the gate
/// (the clean-forgery base rate, counted directly).
pub fn low_confidence_base_rate(
    model: &Classifier,
    images: &ImageBatch,
    policy: &AuthPolicy,
) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let hits = probabilities_all(model, images)
        .chunks(model.classes())
        .filter(|p| admit(p, policy).is_some())
        .count();
    hits as f64 / images.len() as f64
}

/// Continues training a copy of the victim on the adversary's data with the
/// plain loss. `cfg` carries the original optimizer and learning rate.
pub fn finetune_attack(
    model: &Classifier,
    attack_data: &ImageBatch,
    eval_data: &ImageBatch,
    spec: &WatermarkSpec,
    cfg: &TrainConfig,
) -> Result<(Classifier, AttackReport)> {
    let mut victim = model.clone();
    let cfg = TrainConfig {
        regularizer: None,
        ..cfg.clone()
    };
    if cfg.epochs > 0 {
        let mut trainer = Trainer::new(&victim, cfg.clone())?;
        for _ in 0..cfg.epochs {
            trainer.run_epoch(&mut victim, attack_data)?;
        }
    }
    let verification = extract(&victim, spec)?;
    let accuracy = evaluate(&victim, eval_data)?;
    let report = AttackReport {
        attack: "finetune".into(),
        params: format!(
            "epochs={};lr={};samples={}",
            cfg.epochs,
            cfg.learning_rate,
            attack_data.len()
        ),
        accuracy: Some(accuracy),
        wm_matched: Some(verification.matched),
        forgery_rate: None,
        seed: cfg.seed,
    };
    Ok((victim, report))
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "pruning rate must be in [0, 1), got {rate}"
        )))
    }
}

/// `⌈rate·n⌉`, tolerant of representation error in `rate·n`.
pub fn prune_count(n: usize, rate: f64) -> usize {
    ((rate * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices of `weights` ordered by ascending magnitude, ties by index.
fn magnitude_order(weights: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[a]
            .abs()
            .total_cmp(&weights[b].abs())
            .then(a.cmp(&b))
    });
    order
}

/// Largest magnitude that pruning at `rate` zeroes, or `None` when nothing
/// is pruned.
pub fn pruning_threshold(weights: &[f32], rate: f64) -> Option<f32> {
    let count = prune_count(weights.len(), rate);
    (count > 0).then(|| weights[magnitude_order(weights)[count - 1]].abs())
}

fn prune_in_place(weights: &mut [f32], rate: f64) {
    let count = prune_count(weights.len(), rate);
    for i in magnitude_order(weights).into_iter().take(count) {
        weights[i] = 0.0;
    }
}

/// Copy of `model` with the smallest `rate` fraction of weights zeroed in
/// every convolutional and dense layer. Biases are kept.
pub fn prune_layers(model: &Classifier, rate: f64) -> Result<Classifier> {
    check_rate(rate)?;
    let mut pruned = model.clone();
    for (w, _) in pruned.params_mut() {
        prune_in_place(w, rate);
    }
    Ok(pruned)
}

pub fn prune_attack(
    model: &Classifier,
    rate: f64,
    spec: &WatermarkSpec,
    eval_data: &ImageBatch,
) -> Result<(Classifier, AttackReport)> {
    let pruned = prune_layers(model, rate)?;
    let verification = extract(&pruned, spec)?;
    let accuracy = evaluate(&pruned, eval_data)?;
    let report = AttackReport {
        attack: "prune".into(),
        params: format!("rate={rate}"),
        accuracy: Some(accuracy),
        wm_matched: Some(verification.matched),
        forgery_rate: None,
        seed: spec.seed,
    };
    Ok((pruned, report))
}

/// True iff no watermark position can be zeroed by pruning at `rate`, that
/// is every position's magnitude is strictly above the layer threshold.
pub fn predict_wm_survival(spec: &WatermarkSpec, model: &Classifier, rate: f64) -> Result<bool> {
    check_rate(rate)?;
    let conv = model.conv(&spec.layer)?;
    spec.check_layer(conv)?;
    let Some(threshold) = pruning_threshold(&conv.weight, rate) else {
        return Ok(true);
    };
    Ok(spec
        .tensor_indices(conv.out_channels)
        .all(|i| conv.weight[i].abs() > threshold))
}

/// Rates 0, 10, ..., 90 percent.
pub fn standard_prune_rates() -> Vec<f64> {
    (0..10).map(|i| f64::from(i) / 10.0).collect()
}

/// Prunes the same checkpoint at each rate. Each report also carries the
/// survival prediction in its parameters.
pub fn prune_sweep(
    model: &Classifier,
    spec: &WatermarkSpec,
    rates: &[f64],
    eval_data: &ImageBatch,
) -> Result<Vec<(AttackReport, bool)>> {
    rates
        .iter()
        .map(|&r| {
            let (_, mut report) = prune_attack(model, r, spec, eval_data)?;
            let survives = predict_wm_survival(spec, model, r)?;
            report.params = format!("{};predicted_survival={survives}", report.params);
            Ok((report, survives))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_lenet5;

    #[test]
    fn prune_count_absorbs_float_error() {
        assert_eq!(prune_count(150, 0.1), 15);
        assert_eq!(prune_count(2400, 0.3), 720);
        assert_eq!(prune_count(10, 0.0), 0);
        assert_eq!(prune_count(10, 0.05), 1);
        assert_eq!(prune_count(3, 0.5), 2);
    }

    #[test]
    fn pruning_zeroes_smallest_magnitudes() {
        let model = build_lenet5(10, 4).unwrap();
        let pruned = prune_layers(&model, 0.5).unwrap();
        for ((w0, b0), (w1, b1)) in model.params().iter().zip(pruned.params()) {
            assert_eq!(b0, &b1);
            let zeroed: Vec<f32> = w0
                .iter()
                .zip(w1)
                .filter(|(_, n)| **n == 0.0)
                .map(|(o, _)| o.abs())
                .collect();
            let kept: Vec<f32> = w0
                .iter()
                .zip(w1)
                .filter(|(_, n)| **n != 0.0)
                .map(|(o, _)| o.abs())
                .collect();
            assert_eq!(zeroed.len(), prune_count(w0.len(), 0.5));
            let hi = zeroed.iter().copied().fold(0.0, f32::max);
            assert!(kept.iter().all(|&k| k >= hi));
        }
    }

    #[test]
    fn rate_zero_is_identity_and_one_is_rejected() {
        let model = build_lenet5(10, 4).unwrap();
        assert_eq!(prune_layers(&model, 0.0).unwrap(), model);
        assert!(prune_layers(&model, 1.0).is_err());
        assert!(prune_layers(&model, -0.1).is_err());
    }

    #[test]
    fn threshold_is_largest_pruned_magnitude() {
        let w = [0.5f32, -0.1, 0.3, -0.7, 0.2];
        assert_eq!(pruning_threshold(&w, 0.0), None);
        assert_eq!(pruning_threshold(&w, 0.2), Some(0.1));
        assert_eq!(pruning_threshold(&w, 0.5), Some(0.3));
        assert_eq!(pruning_threshold(&w, 0.99), Some(0.7));
    }

    #[test]
    fn forgery_budget_is_checked() {
        let model = build_lenet5(10, 0).unwrap();
        let data = ImageBatch::new(vec![0.5; 784 * 2], vec![1, 2], (28, 28, 1), 10).unwrap();
        let policy = AuthPolicy::standard(10);
        for budget in [0, 3] {
            assert!(matches!(
                forgery_attack(&model, &policy, &data, ForgeryMethod::Clean, budget, 0),
                Err(Error::Precondition(_))
            ));
        }
    }

    #[test]
    fn fgsm_moves_each_pixel_by_at_most_eps() {
        let model = build_lenet5(10, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<f32> = (0..784 * 3).map(|_| rng.random::<f32>()).collect();
        let data = ImageBatch::new(pixels.clone(), vec![0, 5, 9], (28, 28, 1), 10).unwrap();
        let adv = fgsm(&model, &data, 0.1);
        assert_eq!(adv.len(), pixels.len());
        for (a, x) in adv.iter().zip(&pixels) {
            assert!((0.0..=1.0).contains(a));
            assert!((a - x).abs() <= 0.1 + 1e-6);
        }
    }
}
