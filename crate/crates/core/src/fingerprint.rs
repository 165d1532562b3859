//! Per-user fingerprints: adversarial examples pinned to a `(class,
//! confidence)` pair, and their allocation to users.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cw::{self, CwParams, CwTarget};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{argmax, Classifier};

/// Bounds of the low-confidence band from which legal confidences are drawn.
pub const LOW_CONFIDENCE_BAND: (f64, f64) = (0.10, 0.50);

/// Who the control layer admits: top-1 class in `legal_classes` with a
/// confidence within `tolerance` of one of `confidences`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthPolicy {
    pub legal_classes: Vec<usize>,
    pub confidences: Vec<f64>,
    pub tolerance: f64,
}

impl AuthPolicy {
    /// All `classes` legal, confidences {0.20, 0.30, 0.40}, ε = 0.01.
    pub fn standard(classes: usize) -> Self {
        Self {
            legal_classes: (0..classes).collect(),
            confidences: vec![0.20, 0.30, 0.40],
            tolerance: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = LOW_CONFIDENCE_BAND;
        if self.confidences.is_empty() || self.legal_classes.is_empty() {
            return Err(Error::Precondition(
                "policy needs classes and confidences".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Precondition("tolerance must be positive".into()));
        }
        if let Some(c) = self.confidences.iter().find(|&&c| !(c > lo && c < hi)) {
            return Err(Error::Precondition(format!(
                "confidence {c} outside the open band ({lo}, {hi})"
            )));
        }
        let mut sorted = self.confidences.clone();
        sorted.sort_by(f64::total_cmp);
        if let Some(w) = sorted
            .windows(2)
            .find(|w| w[1] - w[0] <= 2.0 * self.tolerance)
        {
            return Err(Error::Precondition(format!(
                "confidences {} and {} are not separated by more than 2ε",
                w[0], w[1]
            )));
        }
        Ok(())
    }

    pub fn is_legal(&self, class: usize, confidence: f64) -> bool {
        self.legal_classes.contains(&class) && self.confidences.contains(&confidence)
    }
}

/// Settings of the pinned C&W search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub learning_rate: f64,
    pub alpha_range: (f64, f64),
    pub initial_alpha: f64,
    pub max_iterations: usize,
    pub search_steps: usize,
    /// Required `|P_t − c|` at generation time; must be below the gate ε.
    pub tolerance: f64,
}

impl GenConfig {
    /// MNIST settings: learning rate 0.005, α ∈ (0, 40) starting at 20.
    pub fn mnist() -> Self {
        Self {
            learning_rate: 0.005,
            alpha_range: (0.0, 40.0),
            initial_alpha: 20.0,
            max_iterations: 1000,
            search_steps: 5,
            tolerance: 0.005,
        }
    }

    /// CIFAR-style settings: learning rate 0.001, α ∈ (0, 1) starting at 0.5.
    pub fn cifar() -> Self {
        Self {
            learning_rate: 0.001,
            alpha_range: (0.0, 1.0),
            initial_alpha: 0.5,
            ..Self::mnist()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.alpha_range;
        if !(lo < self.initial_alpha && self.initial_alpha < hi) {
            return Err(Error::Precondition(format!(
                "initial α {} not inside ({lo}, {hi})",
                self.initial_alpha
            )));
        }
        if !(self.tolerance > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Precondition(
                "tolerance and learning rate must be positive".into(),
            ));
        }
        if self.max_iterations == 0 || self.search_steps == 0 {
            return Err(Error::Precondition("empty iteration budget".into()));
        }
        Ok(())
    }

    fn cw_params(&self) -> CwParams {
        CwParams {
            learning_rate: self.learning_rate,
            alpha_lo: self.alpha_range.0,
            alpha_hi: self.alpha_range.1,
            initial_alpha: self.initial_alpha,
            max_iterations: self.max_iterations,
            search_steps: self.search_steps,
            abort_early: false,
        }
    }
}

/// A fingerprint output: the `(class, confidence)` identity of one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fo {
    pub class: usize,
    pub confidence: f64,
}

impl fmt::Display for Fo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {:.2})", self.class, self.confidence)
    }
}

/// A generated adversarial example before it is bound to a user.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub image: Vec<f32>,
    pub fo: Fo,
    /// `P_t` observed at generation time.
    pub observed: f64,
    pub l2: f64,
    pub alpha: f64,
    pub iterations: usize,
}

/// Best candidate of a failed generation and how far it was from the goal.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationFailure {
    pub fo: Fo,
    pub best_image: Vec<f32>,
    pub predicted: usize,
    pub target_confidence: f64,
    pub residual: f64,
}

impl fmt::Display for GenerationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "target {} not reached: best candidate predicts {} with P_t = {:.4} (|P_t − c| = {:.4})",
            self.fo, self.predicted, self.target_confidence, self.residual
        )
    }
}

fn check_request(
    model: &Classifier,
    seed: &[f32],
    fo: Fo,
    policy: &AuthPolicy,
    cfg: &GenConfig,
) -> Result<()> {
    policy.validate()?;
    cfg.validate()?;
    if cfg.tolerance >= policy.tolerance {
        return Err(Error::Precondition(format!(
            "generation tolerance {} must be below the gate tolerance {}",
            cfg.tolerance, policy.tolerance
        )));
    }
    if !policy.is_legal(fo.class, fo.confidence) {
        return Err(Error::Precondition(format!(
            "{fo} is not a legal fingerprint output"
        )));
    }
    if fo.class >= model.classes() {
        return Err(Error::Precondition(format!(
            "class {} out of range",
            fo.class
        )));
    }
    if seed.len() != model.input_shape().len() {
        return Err(Error::Precondition("seed image has the wrong size".into()));
    }
    if seed.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Precondition(
            "seed image outside the [0, 1] box".into(),
        ));
    }
    Ok(())
}

/// Generates fingerprints for several seed images at once, all targeting
/// `fo`. Each entry succeeds or carries its best failed candidate.
pub fn generate_fingerprints(
    model: &Classifier,
    seeds: &[&[f32]],
    fo: Fo,
    policy: &AuthPolicy,
    cfg: &GenConfig,
) -> Result<Vec<Result<Fingerprint, GenerationFailure>>> {
    for s in seeds {
        check_request(model, s, fo, policy, cfg)?;
    }
    let target = CwTarget {
        class: fo.class,
        pin: Some((fo.confidence, cfg.tolerance)),
        spread: false,
    };
    let mut outcomes = cw::search(model, seeds, target, &cfg.cw_params());
    // Seeds that stalled get a second search with the spread objective.
    let failed: Vec<usize> = (0..seeds.len()).filter(|&i| !outcomes[i].success).collect();
    if !failed.is_empty() {
        let retry: Vec<&[f32]> = failed.iter().map(|&i| seeds[i]).collect();
        let spread = CwTarget {
            spread: true,
            ..target
        };
        for (i, mut o) in
            failed
                .into_iter()
                .zip(cw::search(model, &retry, spread, &cfg.cw_params()))
        {
            o.iterations += outcomes[i].iterations;
            if o.success
                || (o.target_confidence - fo.confidence).abs()
                    < (outcomes[i].target_confidence - fo.confidence).abs()
            {
                outcomes[i] = o;
            }
        }
    }
    Ok(outcomes
        .into_iter()
        .map(|o| {
            if o.success {
                Ok(Fingerprint {
                    image: o.image,
                    fo,
                    observed: o.target_confidence,
                    l2: o.l2,
                    alpha: o.alpha,
                    iterations: o.iterations,
                })
            } else {
                Err(GenerationFailure {
                    fo,
                    residual: (o.target_confidence - fo.confidence).abs(),
                    best_image: o.image,
                    predicted: o.predicted,
                    target_confidence: o.target_confidence,
                })
            }
        })
        .collect())
}

/// Generates one fingerprint from `seed`.
pub fn generate_fingerprint(
    model: &Classifier,
    seed: &[f32],
    fo: Fo,
    policy: &AuthPolicy,
    cfg: &GenConfig,
) -> Result<Fingerprint> {
    generate_fingerprints(model, &[seed], fo, policy, cfg)?
        .pop()
        .expect("one outcome per seed")
        .map_err(|f| Error::Generation(Box::new(f)))
}

/// Bijection between user ids `1..=K·T` and fingerprint outputs: class `i`
/// with the `j`-th confidence (1-based) goes to user `i·T + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub confidences: Vec<f64>,
    pub users: BTreeMap<u64, Fo>,
}

impl Allocation {
    pub fn fo(&self, user: u64) -> Option<Fo> {
        self.users.get(&user).copied()
    }

    /// Inverse lookup. `confidence` must be one of the allocated values.
    pub fn user(&self, fo: Fo) -> Option<u64> {
        let t = self.confidences.len() as u64;
        let j = self.confidences.iter().position(|&c| c == fo.confidence)? as u64 + 1;
        let id = fo.class as u64 * t + j;
        self.users.contains_key(&id).then_some(id)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

pub fn allocate(classes: usize, confidences: &[f64]) -> Allocation {
    let t = confidences.len() as u64;
    let mut users = BTreeMap::new();
    for i in 0..classes {
        for (j, &c) in confidences.iter().enumerate() {
            users.insert(
                i as u64 * t + j as u64 + 1,
                Fo {
                    class: i,
                    confidence: c,
                },
            );
        }
    }
    Allocation {
        confidences: confidences.to_vec(),
        users,
    }
}

/// Number of users distinguishable with `classes` classes, tolerance `eps` and
/// confidence band `(z1, z2)`: `⌊K·(z2 − z1)/(2ε)⌋`.
pub fn capacity(classes: usize, eps: f64, z1: f64, z2: f64) -> Result<u64> {
    if !(z1 < z2) || !(eps > 0.0) {
        return Err(Error::Precondition(format!(
            "capacity needs z1 < z2 and ε > 0 (got ({z1}, {z2}), ε = {eps})"
        )));
    }
    let slots = (z2 - z1) / (2.0 * eps);
    // Absorb representation error such as 0.4/0.02 = 19.999999999999996.
    let per_class = (slots + 1e-9).floor() as u64;
    Ok(classes as u64 * per_class)
}

/// One authorized user's fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintRecord {
    pub user_id: u64,
    pub image: ImageBatch,
    pub target: usize,
    pub confidence: f64,
    pub meta: RecordMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    /// Test-split index of the seed image.
    pub seed_index: usize,
    pub seed: u64,
    pub iterations: usize,
    pub alpha: f64,
    pub l2: f64,
    /// `|P_t − c|` from the validating forward pass.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintLibrary {
    pub policy: AuthPolicy,
    pub allocation: Allocation,
    pub records: Vec<FingerprintRecord>,
    /// Fingerprint outputs that could not be generated, with the reason.
    pub failures: Vec<(u64, Fo, String)>,
    /// Free-form tags stored in the manifest.
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibraryConfig {
    pub gen: GenConfig,
    /// Seed images tried per fingerprint output before giving up.
    pub attempts: usize,
    pub seed: u64,
}

/// Confirms on a fresh forward pass that `image` lands on `fo` within the
/// policy tolerance and strictly on top. Returns `|P_t − c|`.
pub fn validate_pin(model: &Classifier, image: &[f32], fo: Fo, policy: &AuthPolicy) -> Option<f64> {
    let p = model.probabilities(image, 1);
    let top = argmax(&p);
    let strict = p.iter().enumerate().all(|(k, &v)| k == top || v < p[top]);
    let residual = (f64::from(p[fo.class]) - fo.confidence).abs();
    (top == fo.class && strict && residual < policy.tolerance).then_some(residual)
}

/// Generates one verified fingerprint for every allocated user.
///
/// Seed images come from `pool` (a test split) and always carry a label
/// different from the target class. Outputs that fail on every attempt are
/// listed in `failures`; the library still holds the rest.
pub fn build_library(
    model: &Classifier,
    pool: &ImageBatch,
    policy: &AuthPolicy,
    cfg: &LibraryConfig,
) -> Result<FingerprintLibrary> {
    if pool.is_empty() {
        return Err(Error::Precondition("seed image pool is empty".into()));
    }
    policy.validate()?;
    let allocation = allocate(model.classes(), &policy.confidences);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut cursor = 0usize;
    for (&user, &fo) in &allocation.users {
        if !policy.legal_classes.contains(&fo.class) {
            continue;
        }
        let mut last_err = String::from("no seed image with a different label");
        let mut done = false;
        for _ in 0..cfg.attempts.max(1) {
            let Some(idx) = next_seed(pool, &order, &mut cursor, fo.class) else {
                break;
            };
            match generate_fingerprint(model, pool.image(idx), fo, policy, &cfg.gen) {
                Ok(fp) => match validate_pin(model, &fp.image, fo, policy) {
                    Some(residual) => {
                        let image =
                            ImageBatch::new(fp.image, vec![fo.class], pool.dims(), pool.classes())?;
                        records.push(FingerprintRecord {
                            user_id: user,
                            image,
                            target: fo.class,
                            confidence: fo.confidence,
                            meta: RecordMeta {
                                seed_index: idx,
                                seed: cfg.seed,
                                iterations: fp.iterations,
                                alpha: fp.alpha,
                                l2: fp.l2,
                                residual,
                            },
                        });
                        done = true;
                        break;
                    }
                    None => last_err = "failed re-validation".into(),
                },
                Err(Error::Generation(f)) => last_err = f.to_string(),
                Err(e) => return Err(e),
            }
        }
        if !done {
            log::warn!("user {user} {fo}: {last_err}");
            failures.push((user, fo, last_err));
        }
    }
    Ok(FingerprintLibrary {
        policy: policy.clone(),
        allocation,
        records,
        failures,
        metadata: BTreeMap::new(),
    })
}

/// Authentication statistics for one fingerprint output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoEvaluation {
    pub class: usize,
    pub confidence: f64,
    pub user_id: u64,
    pub generated: usize,
    pub authenticated: usize,
    pub success_rate: f64,
    pub mean_l2: f64,
}

/// Generates `count` fingerprints for `fo` from distinct seed images of
/// other classes and counts how many authenticate as `fo`'s user.
pub fn evaluate_fo(
    model: &Classifier,
    pool: &ImageBatch,
    fo: Fo,
    policy: &AuthPolicy,
    gen: &GenConfig,
    count: usize,
    seed: u64,
) -> Result<FoEvaluation> {
    if count == 0 {
        return Err(Error::Precondition(
            "evaluation count must be at least 1".into(),
        ));
    }
    let allocation = allocate(model.classes(), &policy.confidences);
    let user_id = allocation
        .user(fo)
        .ok_or_else(|| Error::Precondition(format!("{fo} is not allocated")))?;
    let mut order: Vec<usize> = (0..pool.len())
        .filter(|&i| pool.label(i) != fo.class)
        .collect();
    if order.len() < count {
        return Err(Error::Precondition(format!(
            "only {} seed images available for {fo}",
            order.len()
        )));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let seeds: Vec<&[f32]> = order[..count].iter().map(|&i| pool.image(i)).collect();
    let mut authenticated = 0;
    let mut l2 = 0.0;
    for fp in generate_fingerprints(model, &seeds, fo, policy, gen)?
        .into_iter()
        .flatten()
    {
        let probs = model.probabilities(&fp.image, 1);
        let who = crate::auth::admit(&probs, policy).and_then(|(id, _, _)| allocation.user(id));
        if who == Some(user_id) {
            authenticated += 1;
            l2 += fp.l2;
        }
    }
    Ok(FoEvaluation {
        class: fo.class,
        confidence: fo.confidence,
        user_id,
        generated: count,
        authenticated,
        success_rate: authenticated as f64 / count as f64,
        mean_l2: if authenticated > 0 {
            l2 / authenticated as f64
        } else {
            0.0
        },
    })
}

fn next_seed(
    pool: &ImageBatch,
    order: &[usize],
    cursor: &mut usize,
    target: usize,
) -> Option<usize> {
    for _ in 0..order.len() {
        let idx = order[*cursor % order.len()];
        *cursor += 1;
        if pool.label(idx) != target {
            return Some(idx);
        }
    }
    None
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    policy: AuthPolicy,
    dims: (usize, usize, usize),
    classes: usize,
    users: Vec<ManifestEntry>,
    failures: Vec<ManifestFailure>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    user_id: u64,
    target: usize,
    confidence: f64,
    image: String,
    #[serde(flatten)]
    meta: RecordMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFailure {
    user_id: u64,
    target: usize,
    confidence: f64,
    reason: String,
}

const MANIFEST: &str = "manifest.json";
const IMAGE_FILE: &str = "image.f32";

impl FingerprintLibrary {
    /// Writes `manifest.json` and one `user-NNNN/image.f32` (raw
    /// little-endian f32, HWC) per record.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut users = Vec::with_capacity(self.records.len());
        let mut dims = (0, 0, 0);
        let mut classes = 0;
        for r in &self.records {
            dims = r.image.dims();
            classes = r.image.classes();
            let rel = format!("user-{:04}/{IMAGE_FILE}", r.user_id);
            let path = dir.join(&rel);
            let parent = path.parent().expect("has parent");
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            let bytes: Vec<u8> = r
                .image
                .pixels()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            users.push(ManifestEntry {
                user_id: r.user_id,
                target: r.target,
                confidence: r.confidence,
                image: rel,
                meta: r.meta.clone(),
            });
        }
        let manifest = Manifest {
            policy: self.policy.clone(),
            dims,
            classes,
            users,
            failures: self
                .failures
                .iter()
                .map(|(u, fo, why)| ManifestFailure {
                    user_id: *u,
                    target: fo.class,
                    confidence: fo.confidence,
                    reason: why.clone(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.policy.validate()?;
        let allocation = allocate(manifest.classes, &manifest.policy.confidences);
        let mut records = Vec::with_capacity(manifest.users.len());
        for u in manifest.users {
            let path = dir.join(&u.image);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Precondition(format!(
                    "{} is not an f32 array",
                    path.display()
                )));
            }
            let pixels: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let image = ImageBatch::new(pixels, vec![u.target], manifest.dims, manifest.classes)?;
            records.push(FingerprintRecord {
                user_id: u.user_id,
                image,
                target: u.target,
                confidence: u.confidence,
                meta: u.meta,
            });
        }
        Ok(Self {
            policy: manifest.policy,
            allocation,
            records,
            failures: manifest
                .failures
                .into_iter()
                .map(|f| {
                    (
                        f.user_id,
                        Fo {
                            class: f.target,
                            confidence: f.confidence,
                        },
                        f.reason,
                    )
                })
                .collect(),
            metadata: manifest.metadata,
        })
    }
}
