//! The control layer appended to a protected model.
//!
//! An input is admitted when its top-1 confidence sits within `ε` of a legal
//! confidence and its top-1 class is legal; everyone else gets a random
//! answer. Admission grants a [`Session`] that runs the bare model.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::fingerprint::{Allocation, AuthPolicy, FingerprintRecord, Fo};
use crate::nn::{argmax, Classifier};
use crate::train::probabilities_all;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GateDecision {
    Authorized {
        /// Top-1 class and the legal confidence it matched.
        identity: Fo,
        /// Observed top-1 confidence.
        observed: f64,
        /// `min_c |observed − c|`.
        error: f64,
    },
    Unauthorized {
        label: usize,
        confidences: Vec<f64>,
    },
}

impl GateDecision {
    pub fn is_authorized(&self) -> bool {
        matches!(self, GateDecision::Authorized { .. })
    }

    /// Label the caller sees.
    pub fn label(&self) -> usize {
        match self {
            GateDecision::Authorized { identity, .. } => identity.class,
            GateDecision::Unauthorized { label, .. } => *label,
        }
    }
}

/// The admission test alone, without the random payload. Returns the
/// identity and `E_c` when admitted.
pub fn admit(probs: &[f32], policy: &AuthPolicy) -> Option<(Fo, f64, f64)> {
    let top = argmax(probs);
    let observed = f64::from(probs[top]);
    let (c, err) = policy
        .confidences
        .iter()
        .map(|&c| (c, (observed - c).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    (err < policy.tolerance && policy.legal_classes.contains(&top)).then_some((
        Fo {
            class: top,
            confidence: c,
        },
        observed,
        err,
    ))
}

/// A uniformly random point on the probability simplex.
pub fn random_confidences<R: Rng + ?Sized>(classes: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..classes).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

fn decide<R: Rng + ?Sized>(probs: &[f32], policy: &AuthPolicy, rng: &mut R) -> GateDecision {
    match admit(probs, policy) {
        Some((identity, observed, error)) => GateDecision::Authorized {
            identity,
            observed,
            error,
        },
        None => GateDecision::Unauthorized {
            label: rng.random_range(0..probs.len()),
            confidences: random_confidences(probs.len(), rng),
        },
    }
}

/// Runs one input through the model and the control layer. The verdict
/// depends only on the model output; `rng` only feeds the random answer.
pub fn gate<R: Rng + ?Sized>(
    model: &Classifier,
    input: &[f32],
    policy: &AuthPolicy,
    rng: &mut R,
) -> GateDecision {
    decide(&model.probabilities(input, 1), policy, rng)
}

/// Resolves a fingerprint to its user id on the issuing model.
pub fn authenticate(
    record: &FingerprintRecord,
    model: &Classifier,
    policy: &AuthPolicy,
    allocation: &Allocation,
) -> Result<u64> {
    let probs = model.probabilities(record.image.image(0), 1);
    let (identity, _, _) = admit(&probs, policy).ok_or(Error::AuthenticationFailed)?;
    allocation.user(identity).ok_or(Error::AuthenticationFailed)
}

/// Labels returned through the control layer: random for rejected inputs,
/// the model's top-1 for admitted ones.
pub fn unauthorized_predict<R: Rng + ?Sized>(
    model: &Classifier,
    inputs: &ImageBatch,
    policy: &AuthPolicy,
    rng: &mut R,
) -> Vec<usize> {
    let k = model.classes();
    probabilities_all(model, inputs)
        .chunks(k)
        .map(|p| decide(p, policy, rng).label())
        .collect()
}

/// Access state of one caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub user_id: Option<u64>,
    pub granted: bool,
    pub policy: AuthPolicy,
}

impl Session {
    /// Authenticates `fingerprint` and grants access on success.
    pub fn open(
        fingerprint: &FingerprintRecord,
        model: &Classifier,
        policy: &AuthPolicy,
        allocation: &Allocation,
    ) -> Self {
        let user_id = authenticate(fingerprint, model, policy, allocation).ok();
        Self {
            granted: user_id.is_some(),
            user_id,
            policy: policy.clone(),
        }
    }
}

/// Plain model inference for a granted session (the control layer is
/// bypassed). Returns top-1 labels and the `len × K` confidences.
pub fn authorized_predict(
    session: &Session,
    model: &Classifier,
    inputs: &ImageBatch,
) -> Result<(Vec<usize>, Vec<f32>)> {
    if !session.granted {
        return Err(Error::AccessDenied);
    }
    let probs = probabilities_all(model, inputs);
    let labels = probs.chunks(model.classes()).map(argmax).collect();
    Ok((labels, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs_with_top(top: usize, p: f32) -> Vec<f32> {
        let rest = (1.0 - p) / 9.0;
        (0..10).map(|k| if k == top { p } else { rest }).collect()
    }

    #[test]
    fn admits_within_tolerance() {
        let policy = AuthPolicy::standard(10);
        let (fo, obs, err) = admit(&probs_with_top(3, 0.305), &policy).unwrap();
        assert_eq!(
            fo,
            Fo {
                class: 3,
                confidence: 0.30
            }
        );
        assert!((obs - 0.305).abs() < 1e-6);
        assert!((err - 0.005).abs() < 1e-6);
        assert!(admit(&probs_with_top(3, 0.315), &policy).is_none());
        assert!(admit(&probs_with_top(3, 0.95), &policy).is_none());
    }

    #[test]
    fn class_membership_is_enforced() {
        let mut policy = AuthPolicy::standard(10);
        policy.legal_classes = vec![0, 1];
        assert!(admit(&probs_with_top(3, 0.30), &policy).is_none());
        assert!(admit(&probs_with_top(1, 0.30), &policy).is_some());
    }

    #[test]
    fn verdict_does_not_depend_on_rng() {
        let policy = AuthPolicy::standard(10);
        for p in [probs_with_top(2, 0.401), probs_with_top(2, 0.7)] {
            let a = decide(&p, &policy, &mut ChaCha8Rng::seed_from_u64(1));
            let b = decide(&p, &policy, &mut ChaCha8Rng::seed_from_u64(2));
            assert_eq!(a.is_authorized(), b.is_authorized());
            if a.is_authorized() {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn random_payload_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let c = random_confidences(10, &mut rng);
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(c.iter().all(|&v| v >= 0.0));
        }
        match decide(&probs_with_top(0, 0.9), &AuthPolicy::standard(10), &mut rng) {
            GateDecision::Unauthorized { label, confidences } => {
                assert!(label < 10);
                assert_eq!(confidences.len(), 10);
            }
            d => panic!("unexpected {d:?}"),
        }
    }

    #[test]
    fn ungranted_session_is_denied() {
        let model = crate::nn::build_lenet5(10, 0).unwrap();
        let session = Session {
            user_id: None,
            granted: false,
            policy: AuthPolicy::standard(10),
        };
        let data = ImageBatch::new(vec![0.0; 784], vec![0], (28, 28, 1), 10).unwrap();
        assert!(matches!(
            authorized_predict(&session, &model, &data),
            Err(Error::AccessDenied)
        ));
    }
}
