//! Mini-batch training and evaluation.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{argmax, cross_entropy, Classifier, Gradients, Network};
use crate::scalar::Real;

/// An additive penalty on the weights of a single named layer.
///
/// Implementations see the layer's weights as `f64` so the same term can be
/// applied to networks of any precision.
pub trait Regularizer: Send + Sync + fmt::Debug {
    fn layer(&self) -> &str;

    /// Returns the penalty; when `grad` is given, writes ∂penalty/∂weight
    /// into it (same length as `weights`).
    fn evaluate(&self, weights: &[f64], grad: Option<&mut [f64]>) -> f64;
}

/// A regularizer scaled by `strength`, contributing `strength · penalty` to
/// the training loss.
#[derive(Debug, Clone)]
pub struct RegularizerHook {
    pub strength: f64,
    pub term: Arc<dyn Regularizer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    AdaptiveMoment {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    MomentumGradient {
        momentum: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::AdaptiveMoment {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }

    pub fn momentum() -> Self {
        OptimizerKind::MomentumGradient { momentum: 0.9 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub regularizer: Option<RegularizerHook>,
}

impl TrainConfig {
    /// Adam at `learning_rate`, batch size 64.
    pub fn adam(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 64,
            learning_rate,
            optimizer: OptimizerKind::adam(),
            seed,
            regularizer: None,
        }
    }

    pub fn momentum(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            optimizer: OptimizerKind::momentum(),
            ..Self::adam(epochs, learning_rate, seed)
        }
    }

    pub fn with_regularizer(mut self, hook: RegularizerHook) -> Self {
        self.regularizer = Some(hook);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Precondition("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Precondition(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Training-set accuracy during the last epoch.
    pub accuracy: f64,
    /// Mean objective per epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

enum OptimizerState {
    Adam {
        step: i32,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    },
    Momentum {
        velocity: Vec<Vec<f32>>,
    },
}

/// Drives training epoch by epoch, keeping optimizer state and the shuffle
/// RNG between calls so a run can change its regularizer midway.
pub struct Trainer {
    cfg: TrainConfig,
    state: OptimizerState,
    rng: ChaCha8Rng,
    epochs_done: usize,
    history: Vec<f64>,
    last_accuracy: f64,
}

impl Trainer {
    pub fn new(model: &Classifier, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let zeros = || -> Vec<Vec<f32>> {
            model
                .params()
                .iter()
                .flat_map(|(w, b)| [vec![0.0; w.len()], vec![0.0; b.len()]])
                .collect()
        };
        let state = match cfg.optimizer {
            OptimizerKind::AdaptiveMoment { .. } => OptimizerState::Adam {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
            OptimizerKind::MomentumGradient { .. } => {
                OptimizerState::Momentum { velocity: zeros() }
            }
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            state,
            epochs_done: 0,
            history: Vec::new(),
            last_accuracy: 0.0,
        })
    }

    pub fn set_regularizer(&mut self, hook: Option<RegularizerHook>) {
        self.cfg.regularizer = hook;
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn run_epoch(&mut self, model: &mut Classifier, data: &ImageBatch) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Precondition("training data is empty".into()));
        }
        let epoch = self.epochs_done + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let d = data.image_len();
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        let mut x = Vec::with_capacity(self.cfg.batch_size * d);
        let mut y = Vec::with_capacity(self.cfg.batch_size);
        for chunk in order.chunks(self.cfg.batch_size) {
            x.clear();
            y.clear();
            for &i in chunk {
                x.extend_from_slice(data.image(i));
                y.push(data.label(i));
            }
            let out = objective(model, &x, &y, self.cfg.regularizer.as_ref());
            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: out.loss,
                });
            }
            total_loss += out.loss * chunk.len() as f64;
            correct += out.correct;
            self.step(model, &out.gradients);
        }
        let loss = total_loss / data.len() as f64;
        let accuracy = correct as f64 / data.len() as f64;
        self.epochs_done = epoch;
        self.history.push(loss);
        self.last_accuracy = accuracy;
        log::debug!("epoch {epoch}: loss {loss:.5} train acc {accuracy:.4}");
        Ok(EpochStats {
            epoch,
            loss,
            accuracy,
        })
    }

    fn step(&mut self, model: &mut Classifier, grads: &Gradients<f32>) {
        let lr = self.cfg.learning_rate;
        let flat: Vec<&Vec<f32>> = grads
            .weights
            .iter()
            .zip(&grads.biases)
            .flat_map(|(w, b)| [w, b])
            .collect();
        let params = model.params_mut();
        let slots = params.into_iter().flat_map(|(w, b)| [w, b]);
        match (&mut self.state, self.cfg.optimizer) {
            (
                OptimizerState::Adam { step, m, v },
                OptimizerKind::AdaptiveMoment {
                    beta1,
                    beta2,
                    epsilon,
                },
            ) => {
                *step += 1;
                let t = *step;
                let lr_t = (lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t))) as f32;
                let (b1, b2, eps) = (beta1 as f32, beta2 as f32, epsilon as f32);
                for (((p, g), m), v) in slots.zip(flat).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
                    }
                }
            }
            (
                OptimizerState::Momentum { velocity },
                OptimizerKind::MomentumGradient { momentum },
            ) => {
                let (mu, lr) = (momentum as f32, lr as f32);
                for ((p, g), vel) in slots.zip(flat).zip(velocity.iter_mut()) {
                    for i in 0..p.len() {
                        vel[i] = mu * vel[i] - lr * g[i];
                        p[i] += vel[i];
                    }
                }
            }
            _ => unreachable!("optimizer state matches its kind"),
        }
    }

    pub fn report(&self) -> TrainReport {
        TrainReport {
            epochs: self.epochs_done,
            batch_size: self.cfg.batch_size,
            learning_rate: self.cfg.learning_rate,
            optimizer: self.cfg.optimizer,
            seed: self.cfg.seed,
            accuracy: self.last_accuracy,
            loss_history: self.history.clone(),
        }
    }
}

/// Trains `model` in place for `cfg.epochs` epochs.
pub fn train(model: &mut Classifier, data: &ImageBatch, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Precondition("training data is empty".into()));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch(model, data)?;
    }
    Ok(trainer.report())
}

pub struct ObjectiveOutput<T> {
    /// `L0 + λ·penalty`.
    pub loss: f64,
    pub data_loss: f64,
    pub penalty: f64,
    pub gradients: Gradients<T>,
    pub correct: usize,
}

/// Training objective on one mini-batch: mean cross-entropy plus the
/// optional scaled regularizer, with gradients for every parameter.
pub fn objective<T: Real>(
    model: &Network<T>,
    x: &[T],
    labels: &[usize],
    hook: Option<&RegularizerHook>,
) -> ObjectiveOutput<T> {
    let k = model.classes();
    let trace = model.forward_trace(x, labels.len());
    let correct = trace
        .logits
        .chunks(k)
        .zip(labels)
        .filter(|(z, &y)| argmax(z) == y)
        .count();
    let (data_loss, dlogits) = cross_entropy(&trace.logits, labels, k);
    let mut gradients = model.zero_gradients();
    model.backward(&trace, &dlogits, Some(&mut gradients), false);
    let mut loss = data_loss;
    let mut penalty = 0.0;
    if let Some(hook) = hook {
        let slot = model
            .param_slot(hook.term.layer())
            .expect("regularizer targets a layer of this model");
        let weights: Vec<f64> = model.params()[slot].0.iter().map(|w| w.as_f64()).collect();
        let mut g = vec![0.0; weights.len()];
        penalty = hook.term.evaluate(&weights, Some(&mut g));
        loss += hook.strength * penalty;
        for (dst, gi) in gradients.weights[slot].iter_mut().zip(g) {
            *dst += T::of(hook.strength * gi);
        }
    }
    ObjectiveOutput {
        loss,
        data_loss,
        penalty,
        gradients,
        correct,
    }
}

/// Fraction of items whose top-1 prediction equals the label.
pub fn evaluate<T: Real>(model: &Network<T>, data: &ImageBatch) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Precondition("evaluation data is empty".into()));
    }
    let preds = predict_all(model, data);
    let hits = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Top-1 predictions for every item, computed in chunks.
pub fn predict_all<T: Real>(model: &Network<T>, data: &ImageBatch) -> Vec<usize> {
    const CHUNK: usize = 500;
    let d = data.image_len();
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let x: Vec<T> = data.pixels()[start * d..end * d]
            .iter()
            .map(|&p| T::of(f64::from(p)))
            .collect();
        out.extend(model.predict(&x, end - start));
    }
    out
}

/// Softmax confidences for every item, `len × K` row-major.
pub fn probabilities_all(model: &Classifier, data: &ImageBatch) -> Vec<f32> {
    const CHUNK: usize = 500;
    let d = data.image_len();
    let mut out = Vec::with_capacity(data.len() * model.classes());
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        out.extend(model.probabilities(&data.pixels()[start * d..end * d], end - start));
    }
    out
}
