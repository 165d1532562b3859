use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use modelguard_core::fingerprint::{AuthPolicy, GenConfig};
use modelguard_core::train::{OptimizerKind, TrainConfig};
use modelguard_core::watermark::{EmbedMode, MapRange, WatermarkPlan, DEFAULT_LAMBDA, WM1};
use modelguard_core::DEFAULT_WATERMARK_LAYER;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DATA_ENV: &str = "MODELGUARD_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub model: ModelKind,
    pub seed: u64,
    pub out: PathBuf,
    pub train: TrainSection,
    pub watermark: WatermarkSection,
    pub policy: PolicySection,
    pub generation: GenerationSection,
    pub attacks: AttackSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lenet5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Adam,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkSection {
    pub digits: Vec<u8>,
    pub layer: String,
    pub lambda: f64,
    pub seed: u64,
    pub mode: EmbedMode,
    /// Epochs of watermark training when `mode` is fine-tune.
    pub finetune_epochs: usize,
    pub map_range: MapRange,
    /// From scratch, solve the map on the clean checkpoint's weight range
    /// rather than on the model after warmup.
    pub range_from_clean: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub legal_classes: Vec<usize>,
    pub confidences: Vec<f64>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub learning_rate: f64,
    pub alpha_range: (f64, f64),
    pub initial_alpha: f64,
    pub max_iterations: usize,
    pub search_steps: usize,
    pub tolerance: f64,
    /// Fingerprints generated per evaluated fingerprint output.
    pub per_fo: usize,
    pub fo_classes: Vec<usize>,
    pub fo_confidences: Vec<f64>,
    /// Seed images tried per user when building the library.
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub forgery_budget: usize,
    pub fgsm_eps: f64,
    pub cw_forgery: bool,
    pub finetune_epochs: Vec<usize>,
    pub finetune_samples: usize,
    pub prune_rates: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/mnist"),
            model: ModelKind::Lenet5,
            seed: 0,
            out: PathBuf::from("runs/default"),
            train: TrainSection::default(),
            watermark: WatermarkSection::default(),
            policy: PolicySection::default(),
            generation: GenerationSection::default(),
            attacks: AttackSection::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
        }
    }
}

impl Default for WatermarkSection {
    fn default() -> Self {
        Self {
            digits: WM1.to_vec(),
            layer: DEFAULT_WATERMARK_LAYER.into(),
            lambda: DEFAULT_LAMBDA,
            seed: 7,
            mode: EmbedMode::FromScratch,
            finetune_epochs: 20,
            map_range: MapRange::default(),
            range_from_clean: true,
        }
    }
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = AuthPolicy::standard(10);
        Self {
            legal_classes: p.legal_classes,
            confidences: p.confidences,
            tolerance: p.tolerance,
        }
    }
}

impl Default for GenerationSection {
    fn default() -> Self {
        let g = GenConfig::mnist();
        Self {
            learning_rate: g.learning_rate,
            alpha_range: g.alpha_range,
            initial_alpha: g.initial_alpha,
            max_iterations: g.max_iterations,
            search_steps: g.search_steps,
            tolerance: g.tolerance,
            per_fo: 20,
            fo_classes: vec![0, 4, 9],
            fo_confidences: vec![0.20, 0.40],
            attempts: 3,
        }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            forgery_budget: 1000,
            fgsm_eps: 0.1,
            cw_forgery: false,
            finetune_epochs: vec![30],
            finetune_samples: 7000,
            prune_rates: (0..10).map(|i| f64::from(i) / 10.0).collect(),
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub full_fidelity: bool,
    pub dataset: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses a config file. Errors name the offending field path.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("invalid config at `{path}`: {}", e.into_inner())
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn resolve(mut self, o: &Overrides) -> anyhow::Result<Self> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(d) = &o.dataset {
            self.dataset = d.clone();
        }
        if o.full_fidelity {
            self.train.epochs = 50;
            self.generation.per_fo = 100;
            self.attacks.forgery_budget = 10_000;
            self.attacks.finetune_epochs = vec![30, 50];
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.watermark.digits.is_empty() {
            bail!("invalid config at `watermark.digits`: at least one digit is required");
        }
        if let Some(d) = self.watermark.digits.iter().find(|&&d| d > 9) {
            bail!("invalid config at `watermark.digits`: digit {d} outside 0..=9");
        }
        if !(self.watermark.lambda > 0.0) {
            bail!("invalid config at `watermark.lambda`: must be positive");
        }
        self.policy()
            .validate()
            .context("invalid config at `policy`")?;
        self.gen_config()
            .validate()
            .context("invalid config at `generation`")?;
        self.train_config(self.train.epochs)
            .validate()
            .context("invalid config at `train`")?;
        if self.generation.per_fo == 0 {
            bail!("invalid config at `generation.per_fo`: must be at least 1");
        }
        for &c in &self.generation.fo_classes {
            if !self.policy.legal_classes.contains(&c) {
                bail!("invalid config at `generation.fo_classes`: class {c} is not legal");
            }
        }
        for &c in &self.generation.fo_confidences {
            if !self.policy.confidences.contains(&c) {
                bail!(
                    "invalid config at `generation.fo_confidences`: {c} is not a legal confidence"
                );
            }
        }
        if self
            .attacks
            .prune_rates
            .iter()
            .any(|r| !(0.0..1.0).contains(r))
        {
            bail!("invalid config at `attacks.prune_rates`: rates must be in [0, 1)");
        }
        if self.attacks.forgery_budget == 0 {
            bail!("invalid config at `attacks.forgery_budget`: must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every field except the output
    /// directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out");
        let bytes = serde_json::to_vec(&v).expect("value serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        let mut cfg = match self.train.optimizer {
            Optimizer::Adam => TrainConfig::adam(epochs, self.train.learning_rate, self.seed),
            Optimizer::Momentum => TrainConfig {
                optimizer: OptimizerKind::momentum(),
                ..TrainConfig::adam(epochs, self.train.learning_rate, self.seed)
            },
        };
        cfg.batch_size = self.train.batch_size;
        cfg
    }

    pub fn policy(&self) -> AuthPolicy {
        AuthPolicy {
            legal_classes: self.policy.legal_classes.clone(),
            confidences: self.policy.confidences.clone(),
            tolerance: self.policy.tolerance,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        let g = &self.generation;
        GenConfig {
            learning_rate: g.learning_rate,
            alpha_range: g.alpha_range,
            initial_alpha: g.initial_alpha,
            max_iterations: g.max_iterations,
            search_steps: g.search_steps,
            tolerance: g.tolerance,
        }
    }

    pub fn watermark_plan(&self) -> WatermarkPlan {
        WatermarkPlan {
            layer: self.watermark.layer.clone(),
            digits: self.watermark.digits.clone(),
            lambda: self.watermark.lambda,
            seed: self.watermark.seed,
            range: self.watermark.map_range,
            reference_range: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 3, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.watermark.digits, WM1.to_vec());
    }

    #[test]
    fn errors_carry_the_field_path() {
        let err = ExperimentConfig::from_json(r#"{"train": {"epochs": "ten"}}"#).unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"attacks": {"budget": 5}}"#).unwrap_err();
        assert!(err.to_string().contains("attacks"), "{err}");
    }

    #[test]
    fn full_fidelity_restores_reference_scale() {
        let cfg = ExperimentConfig::default()
            .resolve(&Overrides {
                full_fidelity: true,
                ..Default::default()
            })
            .unwrap();
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.generation.per_fo, 100);
        assert_eq!(cfg.attacks.forgery_budget, 10_000);
    }

    #[test]
    fn hash_ignores_output_directory_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn semantic_checks_name_the_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.generation.fo_confidences = vec![0.25];
        let err = cfg.validate().unwrap_err();
        assert!(
            err.to_string().contains("generation.fo_confidences"),
            "{err}"
        );
        let mut cfg = ExperimentConfig::default();
        cfg.policy.confidences = vec![0.9];
        assert!(format!("{:#}", cfg.validate().unwrap_err()).contains("policy"));
    }
}
