//! Batched Carlini–Wagner L2 search in tanh space.
//!
//! Each item minimizes `‖x' − x‖² + α·g(x')` with `x' = (tanh δ + 1)/2`,
//! where `g = max(max_{k≠t} Z_k − Z_t, 0)` plus, when a confidence pin `c` is
//! set, `|P_t(x') − c|`. The constant `α` is bisected per item over a fixed
//! range. Items that already succeeded restart each outer step from the
//! clean image; the others continue from where the previous step ended.

use crate::nn::{softmax_rows, Classifier};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwParams {
    pub learning_rate: f64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub initial_alpha: f64,
    pub max_iterations: usize,
    pub search_steps: usize,
    /// Stop an outer step once the batch loss stalls over a tenth of the
    /// iteration budget.
    pub abort_early: bool,
}

/// What a candidate must satisfy to count as a success.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwTarget {
    pub class: usize,
    /// Softmax confidence to pin the target class at, with its tolerance.
    pub pin: Option<(f64, f64)>,
    /// Add `KL(q ‖ P)` to the pin, where `q` puts `c` on the target and
    /// spreads the rest evenly. Its gradient reaches every class, so
    /// low-confidence pins do not stall on ties with the runner-up.
    pub spread: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CwOutcome {
    /// Best successful image, or the final candidate of the last step when no
    /// step succeeded.
    pub image: Vec<f32>,
    pub success: bool,
    pub l2: f64,
    /// Confidence of the target class for `image`.
    pub target_confidence: f64,
    /// Top-1 class for `image`.
    pub predicted: usize,
    /// α in effect when `image` was found.
    pub alpha: f64,
    pub iterations: usize,
}

const TANH_SHRINK: f64 = 0.999_999;

fn to_tanh_space(x: f32) -> f32 {
    ((2.0 * f64::from(x) - 1.0) * TANH_SHRINK).atanh() as f32
}

fn from_tanh_space(d: f32) -> f32 {
    ((d.tanh() + 1.0) * 0.5).clamp(0.0, 1.0)
}

struct Eval {
    success: bool,
    loss: f64,
    target_conf: f64,
    predicted: usize,
}

/// Loss terms and `∂(α·g)/∂Z` for one item.
fn score(z: &[f32], p: &[f32], target: CwTarget, alpha: f64, dz: &mut [f32]) -> Eval {
    let t = target.class;
    let (mut other, mut other_z) = (usize::MAX, f32::NEG_INFINITY);
    for (k, &v) in z.iter().enumerate() {
        if k != t && v > other_z {
            other = k;
            other_z = v;
        }
    }
    let g0 = f64::from(other_z - z[t]).max(0.0);
    dz.iter_mut().for_each(|v| *v = 0.0);
    if g0 > 0.0 {
        dz[other] += alpha as f32;
        dz[t] -= alpha as f32;
    }
    let pt = f64::from(p[t]);
    let runner_up = p
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != t)
        .map(|(_, &v)| v)
        .fold(f32::NEG_INFINITY, f32::max);
    let top1 = p[t] > runner_up;
    let mut g = g0;
    let mut success = top1;
    if let Some((c, tol)) = target.pin {
        let r = pt - c;
        success &= r.abs() <= tol;
        g += r.abs();
        let s = alpha * r.signum();
        // ∂P_t/∂Z_k = P_t(1[k=t] − P_k)
        for (k, d) in dz.iter_mut().enumerate() {
            let ind = if k == t { 1.0 } else { 0.0 };
            *d += (s * pt * (ind - f64::from(p[k]))) as f32;
        }
        if target.spread {
            let rest = (1.0 - c) / (p.len() - 1) as f64;
            for (k, d) in dz.iter_mut().enumerate() {
                let q = if k == t { c } else { rest };
                let pk = f64::from(p[k]).max(1e-30);
                g += q * (q / pk).ln();
                *d += (alpha * (pk - q)) as f32;
            }
        }
    }
    let predicted = crate::nn::argmax(p);
    Eval {
        success,
        loss: alpha * g,
        target_conf: pt,
        predicted,
    }
}

/// Runs the search for a batch of seed images sharing one target.
pub fn search(
    model: &Classifier,
    seeds: &[&[f32]],
    target: CwTarget,
    params: &CwParams,
) -> Vec<CwOutcome> {
    let n = seeds.len();
    let k = model.classes();
    let d = model.input_shape().len();
    assert!(target.class < k, "target class out of range");
    assert!(
        seeds.iter().all(|s| s.len() == d),
        "seed image size mismatch"
    );

    let x0: Vec<f32> = seeds.iter().flat_map(|s| s.iter().copied()).collect();
    let delta0: Vec<f32> = x0.iter().map(|&v| to_tanh_space(v)).collect();
    let mut alpha = vec![params.initial_alpha; n];
    let mut lo = vec![params.alpha_lo; n];
    let mut hi = vec![params.alpha_hi; n];
    let mut best: Vec<Option<CwOutcome>> = vec![None; n];
    let mut last: Vec<Option<CwOutcome>> = vec![None; n];
    let mut iterations = 0usize;

    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let lr = params.learning_rate as f32;
    let mut dz = vec![0.0f32; n * k];
    let mut xadv = vec![0.0f32; n * d];

    let mut delta = delta0.clone();
    for _ in 0..params.search_steps {
        for b in 0..n {
            if best[b].is_some() {
                delta[b * d..(b + 1) * d].copy_from_slice(&delta0[b * d..(b + 1) * d]);
            }
        }
        let mut m = vec![0.0f32; n * d];
        let mut v = vec![0.0f32; n * d];
        let mut step_success = vec![false; n];
        let mut prev_loss = f64::INFINITY;
        let check_every = (params.max_iterations / 10).max(1);

        for it in 0..params.max_iterations {
            iterations += 1;
            for (xa, &dl) in xadv.iter_mut().zip(&delta) {
                *xa = from_tanh_space(dl);
            }
            let trace = model.forward_trace(&xadv, n);
            let mut p = trace.logits.clone();
            softmax_rows(&mut p, k);
            let mut batch_loss = 0.0;
            for b in 0..n {
                let row = b * k..(b + 1) * k;
                let e = score(
                    &trace.logits[row.clone()],
                    &p[row.clone()],
                    target,
                    alpha[b],
                    &mut dz[row],
                );
                let img = &xadv[b * d..(b + 1) * d];
                let l2sq: f64 = img
                    .iter()
                    .zip(&x0[b * d..(b + 1) * d])
                    .map(|(a, c)| f64::from(a - c).powi(2))
                    .sum();
                batch_loss += l2sq + e.loss;
                let outcome = || CwOutcome {
                    image: img.to_vec(),
                    success: e.success,
                    l2: l2sq.sqrt(),
                    target_confidence: e.target_conf,
                    predicted: e.predicted,
                    alpha: alpha[b],
                    iterations,
                };
                if e.success {
                    step_success[b] = true;
                    if best[b].as_ref().is_none_or(|o| l2sq.sqrt() < o.l2) {
                        best[b] = Some(outcome());
                    }
                }
            }
            if params.abort_early && (it + 1) % check_every == 0 {
                if batch_loss > prev_loss * 0.9999 {
                    break;
                }
                prev_loss = batch_loss;
            }
            let gx = model
                .backward(&trace, &dz, None, true)
                .expect("input gradient requested");
            let t = (it + 1) as i32;
            let lr_t = lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
            for i in 0..n * d {
                let xa = xadv[i];
                let dxdd = 0.5 * (1.0 - (2.0 * xa - 1.0).powi(2));
                let g = (2.0 * (xa - x0[i]) + gx[i]) * dxdd;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                delta[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }

        for b in 0..n {
            if best[b].is_none() {
                let img = &xadv[b * d..(b + 1) * d];
                last[b] = Some(snapshot(
                    model,
                    img,
                    &x0[b * d..(b + 1) * d],
                    target,
                    alpha[b],
                    iterations,
                ));
            }
            if step_success[b] {
                hi[b] = hi[b].min(alpha[b]);
            } else {
                lo[b] = lo[b].max(alpha[b]);
            }
            alpha[b] = 0.5 * (lo[b] + hi[b]);
        }
    }

    best.into_iter()
        .zip(last)
        .enumerate()
        .map(|(b, (best, last))| {
            best.or(last).unwrap_or_else(|| {
                let x = &x0[b * d..(b + 1) * d];
                snapshot(model, x, x, target, alpha[b], iterations)
            })
        })
        .collect()
}

fn snapshot(
    model: &Classifier,
    img: &[f32],
    x0: &[f32],
    target: CwTarget,
    alpha: f64,
    iterations: usize,
) -> CwOutcome {
    let p = model.probabilities(img, 1);
    let mut dz = vec![0.0; p.len()];
    let z = model.logits(img, 1);
    let e = score(&z, &p, target, alpha, &mut dz);
    CwOutcome {
        image: img.to_vec(),
        success: e.success,
        l2: img
            .iter()
            .zip(x0)
            .map(|(a, c)| f64::from(a - c).powi(2))
            .sum::<f64>()
            .sqrt(),
        target_confidence: e.target_conf,
        predicted: e.predicted,
        alpha,
        iterations,
    }
}
