//! Entropy-based input perturbation probe.
//!
//! Each query is blended with random benign overlay images; a backdoored
//! input tends to keep a confident (low-entropy) prediction under blending,
//! while benign inputs do not.

use crate::error::{Error, Result};
use crate::hijack::VictimModel;
use crate::nn::entropy;
use crate::rng_for;
use crate::scalar::Scalar;
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripConfig {
    pub n_perturbations: usize,
    pub blend_alpha: f64,
    /// Shared-range histogram bins for the overlap statistic.
    pub bins: usize,
}

impl Default for StripConfig {
    fn default() -> Self {
        Self { n_perturbations: 100, blend_alpha: 0.5, bins: 50 }
    }
}

/// Mean output entropy of one query under `n_perturbations` random blends
/// query * (1 - alpha) + overlay * alpha.
pub fn strip_probe<F: Scalar>(
    victim: &mut VictimModel<F>,
    query: &Array3<F>,
    overlay_pool: &Array4<F>,
    n_perturbations: usize,
    blend_alpha: f64,
    seed: u64,
) -> Result<f64> {
    if n_perturbations == 0 {
        return Err(Error::Config("need at least one perturbation".into()));
    }
    if !(0.0..1.0).contains(&blend_alpha) || blend_alpha == 0.0 {
        return Err(Error::Config(format!("blend alpha {blend_alpha} outside (0,1)")));
    }
    if overlay_pool.dim().0 == 0 {
        return Err(Error::Dataset("empty overlay pool".into()));
    }
    let mut rng = rng_for(seed, "strip-probe");
    let (c, h, w) = query.dim();
    let alpha = F::from_f64_(blend_alpha);
    let keep = F::from_f64_(1.0 - blend_alpha);
    let mut blends = Array4::zeros((n_perturbations, c, h, w));
    for i in 0..n_perturbations {
        let k = rng.random_range(0..overlay_pool.dim().0);
        let overlay = overlay_pool.index_axis(Axis(0), k);
        let blended = query.mapv(|v| v * keep) + overlay.mapv(|v| v * alpha);
        blends.index_axis_mut(Axis(0), i).assign(&blended);
    }
    let probs = victim.probs(&blends);
    let mean: f64 = probs
        .rows()
        .into_iter()
        .map(|row| entropy(&row.to_owned()).to_f64_())
        .sum::<f64>()
        / n_perturbations as f64;
    Ok(mean)
}

/// Entropy distributions of attack vs. benign queries plus their overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripResult {
    pub entropies_attack: Vec<f64>,
    pub entropies_benign: Vec<f64>,
    pub n_perturbations: usize,
    /// Histogram intersection over shared-range bins, in [0,1].
    pub overlap_statistic: f64,
}

pub fn strip_report<F: Scalar>(
    victim: &mut VictimModel<F>,
    attack_queries: &Array4<F>,
    benign_queries: &Array4<F>,
    overlay_pool: &Array4<F>,
    cfg: &StripConfig,
    seed: u64,
) -> Result<StripResult> {
    if attack_queries.dim().0 == 0 || benign_queries.dim().0 == 0 {
        return Err(Error::Dataset("both query sets must be nonempty".into()));
    }
    // both query sets see the same perturbation draws (paired comparison)
    let run = |victim: &mut VictimModel<F>, queries: &Array4<F>| -> Result<Vec<f64>> {
        (0..queries.dim().0)
            .map(|i| {
                strip_probe(
                    victim,
                    &queries.index_axis(Axis(0), i).to_owned(),
                    overlay_pool,
                    cfg.n_perturbations,
                    cfg.blend_alpha,
                    seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9)),
                )
            })
            .collect()
    };
    let entropies_attack = run(victim, attack_queries)?;
    let entropies_benign = run(victim, benign_queries)?;
    let overlap_statistic = histogram_overlap(&entropies_attack, &entropies_benign, cfg.bins);
    Ok(StripResult {
        entropies_attack,
        entropies_benign,
        n_perturbations: cfg.n_perturbations,
        overlap_statistic,
    })
}

/// Histogram intersection of two samples over shared-range bins.
pub fn histogram_overlap(a: &[f64], b: &[f64], bins: usize) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        // all mass in one point: identical degenerate distributions
        return 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let hist = |xs: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let i = (((x - lo) / width) as usize).min(bins - 1);
            h[i] += 1.0 / xs.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    ha.iter().zip(&hb).map(|(&x, &y)| x.min(y)).sum()
}
