//! 2-D feature-space projection via t-SNE.
//!
//! Used to visualize how distilled hijack samples sit relative to benign
//! samples in the victim's penultimate feature space. The embedding is a
//! direct O(n^2) implementation: per-point bandwidths from a binary search
//! on perplexity, early exaggeration, and momentum gradient descent.

use crate::error::{Error, Result};
use crate::hijack::VictimModel;
use crate::rng_for;
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 4.0,
            exaggeration_iters: 100,
        }
    }
}

/// One embedded sample with its provenance tag and class label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub tag: String,
    pub class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureProjection {
    pub points: Vec<ProjectedPoint>,
}

impl FeatureProjection {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,tag,class\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.tag, p.class));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

fn squared_distances(xs: &Array2<f64>) -> Array2<f64> {
    let n = xs.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = xs
                .row(i)
                .iter()
                .zip(xs.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    d
}

/// Symmetrized affinities with per-point bandwidths matched to `perplexity`.
fn joint_affinities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d2.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        // binary search the precision beta = 1/(2 sigma^2)
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0f64;
        let mut row = vec![0.0; n];
        for _ in 0..64 {
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-beta * d2[[i, j]]).exp() };
                sum += row[j];
            }
            let sum = sum.max(1e-300);
            // Shannon entropy of the conditional distribution
            let mut h = 0.0;
            for &r in &row {
                if r > 0.0 {
                    let pj = r / sum;
                    h -= pj * pj.ln();
                }
            }
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        let sum: f64 = row.iter().sum::<f64>().max(1e-300);
        for j in 0..n {
            p[[i, j]] = row[j] / sum;
        }
    }
    // symmetrize and normalize to a joint distribution
    let mut joint = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            joint[[i, j]] = ((p[[i, j]] + p[[j, i]]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

/// Embed feature rows into 2-D. Deterministic for a fixed seed.
pub fn tsne_embed(features: &Array2<f64>, cfg: &TsneConfig, seed: u64) -> Result<Array2<f64>> {
    let n = features.nrows();
    if cfg.perplexity < 2.0 {
        return Err(Error::Config("perplexity must be at least 2".into()));
    }
    if (n as f64) < 3.0 * cfg.perplexity + 1.0 {
        return Err(Error::Config(format!(
            "{n} samples is too few for perplexity {}; need at least {}",
            cfg.perplexity,
            (3.0 * cfg.perplexity + 1.0).ceil() as usize
        )));
    }
    let mut p = joint_affinities(&squared_distances(features), cfg.perplexity);
    p.mapv_inplace(|v| v * cfg.early_exaggeration);
    let mut rng = rng_for(seed, "tsne-init");
    let normal = Normal::new(0.0, 1e-2).expect("valid stddev");
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
    let mut vel = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::from_elem((n, 2), 1.0);
    let mut grad = Array2::<f64>::zeros((n, 2));
    for iter in 0..cfg.iterations {
        if iter == cfg.exaggeration_iters {
            p.mapv_inplace(|v| v / cfg.early_exaggeration);
        }
        // student-t kernel in the embedding
        let mut num = Array2::<f64>::zeros((n, n));
        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = q;
                num[[j, i]] = q;
                z += 2.0 * q;
            }
        }
        let z = z.max(1e-300);
        grad.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / z).max(1e-12);
                let mult = 4.0 * (p[[i, j]] - q) * num[[i, j]];
                grad[[i, 0]] += mult * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += mult * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        for i in 0..n {
            for k in 0..2 {
                let same_sign = grad[[i, k]].signum() == vel[[i, k]].signum();
                gains[[i, k]] =
                    (if same_sign { gains[[i, k]] * 0.8 } else { gains[[i, k]] + 0.2 }).max(0.01);
                vel[[i, k]] =
                    momentum * vel[[i, k]] - cfg.learning_rate * gains[[i, k]] * grad[[i, k]];
                y[[i, k]] += vel[[i, k]];
            }
        }
        // recentre to remove the translational degree of freedom
        for k in 0..2 {
            let mean = y.column(k).sum() / n as f64;
            y.column_mut(k).mapv_inplace(|v| v - mean);
        }
    }
    Ok(y)
}

/// Project inputs through the victim's penultimate features into 2-D,
/// attaching a provenance tag and class label per sample.
pub fn feature_projection<F: Scalar>(
    victim: &mut VictimModel<F>,
    inputs: &Array4<F>,
    classes: &[usize],
    tags: &[String],
    cfg: &TsneConfig,
    seed: u64,
) -> Result<FeatureProjection> {
    let n = inputs.dim().0;
    if classes.len() != n || tags.len() != n {
        return Err(Error::ShapeMismatch {
            context: "projection labels".into(),
            expected: format!("{n} classes and tags"),
            got: format!("{} classes, {} tags", classes.len(), tags.len()),
        });
    }
    let feats = victim.classifier.features(inputs);
    let feats64 = feats.mapv(|v| v.to_f64_());
    let y = tsne_embed(&feats64, cfg, seed)?;
    let points = (0..n)
        .map(|i| ProjectedPoint {
            x: y[[i, 0]],
            y: y[[i, 1]],
            tag: tags[i].clone(),
            class: classes[i],
        })
        .collect();
    Ok(FeatureProjection { points })
}

/// Mean silhouette coefficient of a labeled 2-D embedding. Requires at least
/// two labels; singleton clusters contribute zero.
pub fn silhouette_score(points: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let n = points.nrows();
    if labels.len() != n || n < 2 {
        return Err(Error::Config("need matching labels for at least two points".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Config("silhouette needs at least two clusters".into()));
    }
    let d2 = squared_distances(points);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for j in 0..n {
            if i == j {
                continue;
            }
            let e = sums.entry(labels[j]).or_insert((0.0, 0));
            e.0 += d2[[i, j]].sqrt();
            e.1 += 1;
        }
        let own = labels[i];
        let a = match sums.get(&own) {
            Some(&(s, c)) if c > 0 => s / c as f64,
            _ => {
                // singleton cluster: defined as zero contribution
                continue;
            }
        };
        let b = sums
            .iter()
            .filter(|(&l, _)| l != own)
            .map(|(_, &(s, c))| s / c as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}
