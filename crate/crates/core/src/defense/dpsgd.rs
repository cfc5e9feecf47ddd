//! Differentially private fine-tuning.
//!
//! Per-sample gradients are clipped to a fixed L2 norm, summed, perturbed
//! with Gaussian noise, and averaged before each SGD step. Privacy is
//! tracked with a Renyi-DP accountant for the Gaussian mechanism (no
//! subsampling amplification, so the reported epsilon is an upper bound).

use crate::error::{Error, Result};
use crate::hijack::VictimModel;
use crate::models::{select_batch, select_rows, TrainCfg};
use crate::nn::cross_entropy_logits;
use crate::rng_for;
use crate::scalar::Scalar;
use ndarray::{Array2, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    /// Abort once the accounted epsilon would exceed this.
    pub epsilon_budget: f64,
    pub delta: f64,
    /// Per-sample gradient L2 clipping bound.
    pub clip_norm: f64,
    /// Gaussian noise stddev as a multiple of `clip_norm`.
    pub noise_multiplier: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self { epsilon_budget: 8.0, delta: 1e-5, clip_norm: 1.0, noise_multiplier: 1.0 }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if self.noise_multiplier < 0.0 {
            return Err(Error::Config("noise multiplier must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.delta) || self.delta == 0.0 {
            return Err(Error::Config("delta must lie in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpent {
    pub epsilon: f64,
    pub delta: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct DpOutcome {
    pub epoch_losses: Vec<f64>,
    pub spent: PrivacySpent,
    /// Largest per-sample gradient norm observed after clipping.
    pub max_clipped_norm: f64,
}

/// Epsilon at `delta` after `steps` Gaussian-mechanism releases with noise
/// multiplier `sigma`. Closed-form minimum of the Renyi-to-DP conversion
/// steps*a/(2 sigma^2) + ln(1/delta)/(a-1) over orders a > 1.
pub fn epsilon_for(sigma: f64, steps: usize, delta: f64) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    if sigma <= 0.0 {
        return f64::INFINITY;
    }
    let t = steps as f64;
    let l = (1.0 / delta).ln();
    t / (2.0 * sigma * sigma) + (2.0 * t * l).sqrt() / sigma
}

/// Smallest noise multiplier whose accounted epsilon stays within `epsilon`
/// over `steps` releases, found by bisection.
pub fn noise_for_budget(epsilon: f64, delta: f64, steps: usize) -> Result<f64> {
    if epsilon <= 0.0 || steps == 0 {
        return Err(Error::Config("need a positive budget and at least one step".into()));
    }
    let (mut lo, mut hi) = (1e-4, 1e7);
    if epsilon_for(hi, steps, delta) > epsilon {
        return Err(Error::Config("budget unreachable within the noise search range".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if epsilon_for(mid, steps, delta) > epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

fn grad_norm<F: Scalar>(grads: &[ArrayD<F>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v.to_f64_().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Fine-tune a victim with DP-SGD. Uses plain SGD regardless of
/// `cfg.optimizer` so each released gradient maps to exactly one accounted
/// mechanism invocation.
pub fn dpsgd_finetune<F: Scalar>(
    victim: &mut VictimModel<F>,
    images: &Array4<F>,
    targets: &Array2<F>,
    cfg: &TrainCfg,
    privacy: &PrivacyConfig,
    seed: u64,
) -> Result<DpOutcome> {
    privacy.validate()?;
    let n = images.dim().0;
    if n == 0 {
        return Err(Error::Dataset("empty training set".into()));
    }
    if targets.dim().1 != victim.head_dim() {
        return Err(Error::ShapeMismatch {
            context: "dp fine-tuning targets".into(),
            expected: format!("{} columns", victim.head_dim()),
            got: format!("{}", targets.dim().1),
        });
    }
    let mut order_rng = rng_for(seed, "dp-order");
    let mut noise_rng = rng_for(seed, "dp-noise");
    let noise_std = privacy.noise_multiplier * privacy.clip_norm;
    let normal = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid stddev");
    let lr = F::from_f64_(cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut max_clipped = 0.0f64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let next_eps = epsilon_for(privacy.noise_multiplier, step + 1, privacy.delta);
            if next_eps > privacy.epsilon_budget {
                return Err(Error::PrivacyExhausted {
                    spent: next_eps,
                    budget: privacy.epsilon_budget,
                    step: step + 1,
                });
            }
            let mut summed: Option<Vec<ArrayD<F>>> = None;
            for &i in chunk {
                let bx = select_batch(images, &[i]);
                let by = select_rows(targets, &[i]);
                let logits = victim.classifier.logits(&bx);
                let (loss, grad) = cross_entropy_logits(&logits, &by);
                let loss = loss.to_f64_();
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { context: "epoch", index: epoch });
                }
                total += loss;
                victim.classifier.zero_grads();
                victim.classifier.backward(&grad);
                let mut grads: Vec<ArrayD<F>> = victim
                    .classifier
                    .params()
                    .iter()
                    .map(|p| p.grad.clone())
                    .collect();
                let norm = grad_norm(&grads);
                let scale = if norm > privacy.clip_norm { privacy.clip_norm / norm } else { 1.0 };
                if scale < 1.0 {
                    let s = F::from_f64_(scale);
                    for g in &mut grads {
                        g.mapv_inplace(|v| v * s);
                    }
                }
                max_clipped = max_clipped.max(norm.min(privacy.clip_norm));
                match &mut summed {
                    None => summed = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            *a += g;
                        }
                    }
                }
            }
            let mut summed = summed.expect("nonempty chunk");
            let inv_b = F::from_f64_(1.0 / chunk.len() as f64);
            for g in &mut summed {
                if noise_std > 0.0 {
                    g.mapv_inplace(|v| v + F::from_f64_(normal.sample(&mut noise_rng)));
                }
                g.mapv_inplace(|v| v * inv_b);
            }
            for (p, g) in victim.classifier.params_mut().iter_mut().zip(&summed) {
                ndarray::Zip::from(&mut p.value).and(g).for_each(|v, &d| *v = *v - lr * d);
            }
            step += 1;
        }
        epoch_losses.push(total / n as f64);
    }
    Ok(DpOutcome {
        epoch_losses,
        spent: PrivacySpent {
            epsilon: epsilon_for(privacy.noise_multiplier, step, privacy.delta),
            delta: privacy.delta,
            steps: step,
        },
        max_clipped_norm: max_clipped,
    })
}
