//! Digit watermarks carried by convolution weights.
//!
//! A linear map `d = a·h + b` sends a weight range of the target layer onto
//! `[0, 9]`; the digits live in one output-channel slice. Embedding adds the
//! mean squared error between the mapped weights at secret positions and the
//! owner's digits to the training loss; extraction maps, rounds and compares.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{Classifier, Conv2d, Network};
use crate::scalar::Real;
use crate::train::{evaluate, Regularizer, RegularizerHook, TrainConfig, TrainReport, Trainer};

/// Owner watermark used for the harmlessness and fine-tuning experiments.
pub const WM1: [u8; 13] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 2, 1, 0];
/// Watermark without small digits, used for the pruning experiment.
pub const WM2: [u8; 13] = [3, 8, 7, 6, 8, 7, 6, 9, 9, 4, 8, 6, 5];

pub const DEFAULT_LAMBDA: f64 = 0.01;
/// Epochs trained without the regularizer before the map is frozen when
/// embedding from scratch.
pub const WARMUP_EPOCHS: usize = 2;

/// The linear map `d = a·h + b` with `a·w_min + b = 0` and `a·w_max + b = 9`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapParams {
    pub a: f64,
    pub b: f64,
    pub w_min: f64,
    pub w_max: f64,
}

impl MapParams {
    pub fn apply(&self, h: f64) -> f64 {
        self.a * h + self.b
    }

    /// Weight value that maps exactly onto `digit`.
    pub fn preimage(&self, digit: f64) -> f64 {
        (digit - self.b) / self.a
    }
}

/// Solves `[w_min, w_max]ᵀ·a + b = [0, 9]ᵀ`.
pub fn solve_map(w_min: f64, w_max: f64) -> Result<MapParams> {
    if !(w_min < w_max) || !w_min.is_finite() || !w_max.is_finite() {
        return Err(Error::DegenerateRange(w_min, w_max));
    }
    let span = w_max - w_min;
    Ok(MapParams {
        a: 9.0 / span,
        b: -9.0 * w_min / span,
        w_min,
        w_max,
    })
}

/// Weights of output channel `component` as a flat `(F, F, I)` vector.
pub fn component_weights<T: Real>(conv: &Conv2d<T>, component: usize) -> Vec<T> {
    conv.weight
        .iter()
        .skip(component)
        .step_by(conv.out_channels)
        .copied()
        .collect()
}

/// Index into the `(F, F, I, O)` tensor of position `p` in component `o`.
pub fn tensor_index(conv_out_channels: usize, component: usize, position: usize) -> usize {
    position * conv_out_channels + component
}

/// Picks the output channel with the largest L1 norm (first on ties) and
/// returns it with its flattened weights; `m = F·F·I`.
pub fn select_target_component<T: Real>(conv: &Conv2d<T>) -> (usize, Vec<T>) {
    let mut best = (0, f64::NEG_INFINITY);
    for o in 0..conv.out_channels {
        let l1: f64 = component_weights(conv, o)
            .iter()
            .map(|w| w.as_f64().abs())
            .sum();
        if l1 > best.1 {
            best = (o, l1);
        }
    }
    (best.0, component_weights(conv, best.0))
}

/// Where the map's source range `[w_min, w_max]` is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapRange {
    /// Per-position maximum over all output channels, an `(F, F, I)` tensor.
    /// Positive for trained layers, so larger digits sit on larger weights.
    #[default]
    ChannelPeak,
    /// Signed weights of the selected output channel.
    Component,
}

/// `max_o D[p, o]` for every position `p`.
pub fn channel_peak<T: Real>(conv: &Conv2d<T>) -> Vec<T> {
    conv.weight
        .chunks(conv.out_channels)
        .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
        .collect()
}

/// `n` distinct positions out of `m`, uniform without replacement.
pub fn select_positions(m: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > m {
        return Err(Error::Capacity {
            requested: n,
            capacity: m,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, m, n).into_vec())
}

/// Everything the owner must keep to re-extract a watermark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSpec {
    pub layer: String,
    pub component_index: usize,
    pub positions: Vec<usize>,
    pub digits: Vec<u8>,
    pub map: MapParams,
    pub lambda: f64,
    pub seed: u64,
}

impl WatermarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.digits.len() {
            return Err(Error::Precondition(format!(
                "{} positions for {} digits",
                self.positions.len(),
                self.digits.len()
            )));
        }
        if let Some(d) = self.digits.iter().find(|&&d| d > 9) {
            return Err(Error::Precondition(format!("digit {d} outside 0..=9")));
        }
        let mut sorted = self.positions.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Precondition("watermark positions repeat".into()));
        }
        if !(self.map.a > 0.0) {
            return Err(Error::Precondition("map slope must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Precondition("lambda must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Checks that `conv` can host this spec and returns `m = F·F·I`.
    pub(crate) fn check_layer<T: Real>(&self, conv: &Conv2d<T>) -> Result<usize> {
        let [f, _, i, o] = conv.dims();
        let m = f * f * i;
        if self.component_index >= o {
            return Err(Error::Extraction(format!(
                "component {} out of range for `{}` with {o} output channels",
                self.component_index, self.layer
            )));
        }
        if let Some(p) = self.positions.iter().find(|&&p| p >= m) {
            return Err(Error::Extraction(format!(
                "position {p} out of range for `{}` with {m} slots",
                self.layer
            )));
        }
        Ok(m)
    }

    pub(crate) fn tensor_indices(&self, out_channels: usize) -> impl Iterator<Item = usize> + '_ {
        self.positions
            .iter()
            .map(move |&p| tensor_index(out_channels, self.component_index, p))
    }
}

/// `(1/n)·Σ (d_k − map(v_k))²` over the spec positions, as a training hook.
#[derive(Debug, Clone)]
pub struct WatermarkRegularizer {
    spec: WatermarkSpec,
    out_channels: usize,
}

impl WatermarkRegularizer {
    pub fn new<T: Real>(model: &Network<T>, spec: &WatermarkSpec) -> Result<Self> {
        spec.validate()?;
        let conv = model.conv(&spec.layer)?;
        spec.check_layer(conv)?;
        Ok(Self {
            spec: spec.clone(),
            out_channels: conv.out_channels,
        })
    }

    pub fn hook(self) -> RegularizerHook {
        RegularizerHook {
            strength: self.spec.lambda,
            term: Arc::new(self),
        }
    }
}

impl Regularizer for WatermarkRegularizer {
    fn layer(&self) -> &str {
        &self.spec.layer
    }

    fn evaluate(&self, weights: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let n = self.spec.digits.len() as f64;
        let map = self.spec.map;
        let mut sum = 0.0;
        for (idx, &d) in self
            .spec
            .tensor_indices(self.out_channels)
            .zip(&self.spec.digits)
        {
            let r = f64::from(d) - map.apply(weights[idx]);
            sum += r * r;
            if let Some(g) = grad.as_deref_mut() {
                g[idx] += -2.0 / n * map.a * r;
            }
        }
        sum / n
    }
}

/// Current value of the watermark penalty (without `λ`).
pub fn wm_regularizer<T: Real>(model: &Network<T>, spec: &WatermarkSpec) -> Result<f64> {
    let reg = WatermarkRegularizer::new(model, spec)?;
    let conv = model.conv(&spec.layer)?;
    let w: Vec<f64> = conv.weight.iter().map(|v| v.as_f64()).collect();
    Ok(reg.evaluate(&w, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub digits: Vec<u8>,
    pub matched: bool,
    /// `map(v_k)` before rounding.
    pub raw: Vec<f64>,
    /// Number of positions whose digit differs (diagnostic only).
    pub hamming: usize,
}

/// Rounds half away from zero and clips into `0..=9`.
pub fn to_digit(raw: f64) -> u8 {
    raw.round().clamp(0.0, 9.0) as u8
}

/// Reads the watermark back from a (possibly pirated) model and compares it
/// with the owner's digits. Never modifies the model.
pub fn extract<T: Real>(model: &Network<T>, spec: &WatermarkSpec) -> Result<VerificationResult> {
    let conv = model
        .conv(&spec.layer)
        .map_err(|_| Error::Extraction(format!("suspect model has no layer `{}`", spec.layer)))?;
    spec.check_layer(conv)?;
    if spec.positions.len() != spec.digits.len() {
        return Err(Error::Extraction(
            "positions and digits differ in length".into(),
        ));
    }
    let raw: Vec<f64> = spec
        .tensor_indices(conv.out_channels)
        .map(|i| spec.map.apply(conv.weight[i].as_f64()))
        .collect();
    let digits: Vec<u8> = raw.iter().map(|&r| to_digit(r)).collect();
    let hamming = digits
        .iter()
        .zip(&spec.digits)
        .filter(|(a, b)| a != b)
        .count();
    Ok(VerificationResult {
        matched: hamming == 0,
        digits,
        raw,
        hamming,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedMode {
    FromScratch,
    FineTune,
}

/// Owner-chosen inputs; the component, positions and map are derived during
/// embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkPlan {
    pub layer: String,
    pub digits: Vec<u8>,
    pub lambda: f64,
    pub seed: u64,
    pub range: MapRange,
    /// Range measured on a trained clean model with [`measure_range`]. When
    /// set, the map is solved on it instead of on the model being marked.
    pub reference_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub mode: EmbedMode,
    pub accuracy: f64,
    pub verification: VerificationResult,
    pub training: TrainReport,
    pub warmup_epochs: usize,
}

/// `[min, max]` of the map source of `conv`.
pub fn measure_range<T: Real>(conv: &Conv2d<T>, range: MapRange) -> (f64, f64) {
    let source = match range {
        MapRange::ChannelPeak => channel_peak(conv),
        MapRange::Component => select_target_component(conv).1,
    };
    source
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        })
}

/// Derives a spec from the model's current weights.
pub fn plan_spec<T: Real>(model: &Network<T>, plan: &WatermarkPlan) -> Result<WatermarkSpec> {
    let conv = model.conv(&plan.layer)?;
    let (component, w) = select_target_component(conv);
    let (lo, hi) = plan
        .reference_range
        .unwrap_or_else(|| measure_range(conv, plan.range));
    let map = solve_map(lo, hi)?;
    let positions = select_positions(w.len(), plan.digits.len(), plan.seed)?;
    let spec = WatermarkSpec {
        layer: plan.layer.clone(),
        component_index: component,
        positions,
        digits: plan.digits.clone(),
        map,
        lambda: plan.lambda,
        seed: plan.seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// Trains `model` with the watermark penalty added to its loss.
///
/// From scratch, the first [`WARMUP_EPOCHS`] epochs run without the penalty so
/// the weight range is meaningful before the map is frozen. A watermark that
/// does not verify at the end is reported through `verification.matched`,
/// not as an error.
pub fn embed(
    model: &mut Classifier,
    train_data: &ImageBatch,
    eval_data: &ImageBatch,
    plan: &WatermarkPlan,
    mode: EmbedMode,
    cfg: &TrainConfig,
) -> Result<(WatermarkSpec, EmbedReport)> {
    let warmup = match mode {
        EmbedMode::FromScratch => WARMUP_EPOCHS,
        EmbedMode::FineTune => 0,
    };
    if cfg.epochs <= warmup {
        return Err(Error::Precondition(format!(
            "embedding from scratch needs more than {warmup} epochs"
        )));
    }
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            regularizer: None,
            ..cfg.clone()
        },
    )?;
    for _ in 0..warmup {
        trainer.run_epoch(model, train_data)?;
    }
    let spec = plan_spec(model, plan)?;
    trainer.set_regularizer(Some(WatermarkRegularizer::new(model, &spec)?.hook()));
    for _ in warmup..cfg.epochs {
        trainer.run_epoch(model, train_data)?;
    }
    let verification = extract(model, &spec)?;
    let accuracy = evaluate(model, eval_data)?;
    log::info!(
        "embedded {} digits in `{}` component {}: matched={} acc={accuracy:.4}",
        spec.digits.len(),
        spec.layer,
        spec.component_index,
        verification.matched
    );
    Ok((
        spec,
        EmbedReport {
            mode,
            accuracy,
            verification,
            training: trainer.report(),
            warmup_epochs: warmup,
        },
    ))
}
