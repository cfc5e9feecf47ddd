//! Expert trajectories and the weight-trajectory loss.
//!
//! The surrogate is a classifier whose convolutional backbone is frozen after
//! a short warmup; trajectories track only the linear head. That keeps the
//! matching objective differentiable through the student's unrolled updates
//! without second-order passes through convolutions.

use crate::error::{Error, Result};
use crate::models::ArchId;
use crate::nn::softmax;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Linear classification head over frozen features.
#[derive(Debug, Clone)]
pub struct Head<F: Scalar> {
    /// (classes, feature dim)
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Head<F> {
    pub fn init<R: Rng>(classes: usize, dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / dim as f64).sqrt();
        let w = Array2::from_shape_fn((classes, dim), |_| {
            F::from_f64_(rng.random_range(-bound..bound))
        });
        Self { w, b: Array1::zeros(classes) }
    }

    pub fn logits(&self, z: &Array2<F>) -> Array2<F> {
        z.dot(&self.w.t()) + &self.b
    }

    pub fn flat(&self) -> Vec<F> {
        self.w.iter().chain(self.b.iter()).copied().collect()
    }

    pub fn from_flat(classes: usize, dim: usize, flat: &[F]) -> Self {
        assert_eq!(flat.len(), classes * dim + classes);
        let w = Array2::from_shape_vec((classes, dim), flat[..classes * dim].to_vec()).unwrap();
        let b = Array1::from_vec(flat[classes * dim..].to_vec());
        Self { w, b }
    }

    /// One SGD step on softmax cross-entropy: returns the batch probabilities
    /// used (needed to reverse the step analytically).
    pub fn sgd_step(&mut self, z: &Array2<F>, y: &Array2<F>, lr: F) -> Array2<F> {
        let batch = z.dim().0;
        let p = softmax(&self.logits(z));
        let err = &p - y; // (B, K)
        let scale = lr / F::from_f64_(batch as f64);
        self.w = &self.w - &(err.t().dot(z) * scale);
        self.b = &self.b - &(err.sum_axis(ndarray::Axis(0)) * scale);
        p
    }
}

/// Snapshots of surrogate head parameters along a training run.
#[derive(Debug, Clone)]
pub struct ExpertTrajectory<F: Scalar> {
    pub snapshots: Vec<Vec<F>>,
    pub snapshot_interval: usize,
    pub arch: ArchId,
    pub seed: u64,
    pub classes: usize,
    pub feat_dim: usize,
}

impl<F: Scalar> ExpertTrajectory<F> {
    /// A trajectory usable for matching needs at least two snapshots and
    /// nonzero movement between consecutive ones.
    pub fn validate_for_matching(&self) -> Result<()> {
        if self.snapshots.len() < 2 {
            return Err(Error::Config(format!(
                "trajectory has {} snapshots, need at least 2",
                self.snapshots.len()
            )));
        }
        for pair in self.snapshots.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::DegenerateSegment);
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = TrajectoryMeta {
            arch_id: self.arch.as_str().to_string(),
            seed: self.seed,
            interval: self.snapshot_interval,
            snapshot_count: self.snapshots.len(),
            classes: self.classes,
            feat_dim: self.feat_dim,
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        for (i, snap) in self.snapshots.iter().enumerate() {
            let mut bytes = Vec::with_capacity(snap.len() * 4);
            for v in snap {
                bytes.extend_from_slice(&v.to_f32_().to_le_bytes());
            }
            fs::write(dir.join(format!("snap_{i:04}.f32")), bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.is_file() {
            return Err(Error::MissingArtifact(meta_path.display().to_string()));
        }
        let meta: TrajectoryMeta = serde_json::from_slice(&fs::read(meta_path)?)?;
        let arch: ArchId = meta
            .arch_id
            .parse()
            .map_err(|_| Error::Artifact(format!("unknown arch '{}'", meta.arch_id)))?;
        let mut snapshots = Vec::with_capacity(meta.snapshot_count);
        for i in 0..meta.snapshot_count {
            let bytes = fs::read(dir.join(format!("snap_{i:04}.f32")))?;
            snapshots.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| F::from_f32_(f32::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            );
        }
        Ok(Self {
            snapshots,
            snapshot_interval: meta.interval,
            arch,
            seed: meta.seed,
            classes: meta.classes,
            feat_dim: meta.feat_dim,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryMeta {
    arch_id: String,
    seed: u64,
    interval: usize,
    snapshot_count: usize,
    classes: usize,
    feat_dim: usize,
}

/// Train a head on fixed features by minibatch SGD, snapshotting every
/// `interval` steps (the initialization is snapshot 0).
#[allow(clippy::too_many_arguments)]
pub fn record_head_trajectory<F: Scalar, R: Rng>(
    z: &Array2<F>,
    y: &Array2<F>,
    arch: ArchId,
    steps: usize,
    interval: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    rng: &mut R,
) -> Result<ExpertTrajectory<F>> {
    let (n, dim) = z.dim();
    let classes = y.dim().1;
    let mut head = Head::init(classes, dim, rng);
    let mut snapshots = vec![head.flat()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = 0usize;
    order.shuffle(rng);
    for step in 1..=steps {
        if pos + batch_size > n {
            order.shuffle(rng);
            pos = 0;
        }
        let take = batch_size.min(n);
        let idx = &order[pos..pos + take];
        pos += take;
        let zb = crate::models::select_rows(z, idx);
        let yb = crate::models::select_rows(y, idx);
        let p = head.sgd_step(&zb, &yb, F::from_f64_(lr));
        if p.iter().any(|v| !v.to_f64_().is_finite()) {
            return Err(Error::NonFiniteLoss { context: "expert trajectory", index: step });
        }
        if step % interval == 0 {
            snapshots.push(head.flat());
        }
    }
    Ok(ExpertTrajectory {
        snapshots,
        snapshot_interval: interval,
        arch,
        seed,
        classes,
        feat_dim: dim,
    })
}

/// ||theta_hat - theta_end||^2 / ||theta_start - theta_end||^2.
pub fn trajectory_loss<F: Scalar>(
    theta_hat: &[F],
    theta_start: &[F],
    theta_end: &[F],
) -> Result<f64> {
    let (loss, _) = trajectory_loss_grad(theta_hat, theta_start, theta_end)?;
    Ok(loss)
}

/// Loss plus its gradient with respect to theta_hat.
pub fn trajectory_loss_grad<F: Scalar>(
    theta_hat: &[F],
    theta_start: &[F],
    theta_end: &[F],
) -> Result<(f64, Vec<F>)> {
    if theta_hat.len() != theta_start.len() || theta_hat.len() != theta_end.len() {
        return Err(Error::ShapeMismatch {
            context: "trajectory_loss".into(),
            expected: format!("{}", theta_hat.len()),
            got: format!("{} / {}", theta_start.len(), theta_end.len()),
        });
    }
    let denom: f64 = theta_start
        .iter()
        .zip(theta_end)
        .map(|(&a, &b)| (a.to_f64_() - b.to_f64_()).powi(2))
        .sum();
    if denom == 0.0 {
        return Err(Error::DegenerateSegment);
    }
    let numer: f64 = theta_hat
        .iter()
        .zip(theta_end)
        .map(|(&a, &b)| (a.to_f64_() - b.to_f64_()).powi(2))
        .sum();
    let scale = F::from_f64_(2.0 / denom);
    let grad = theta_hat
        .iter()
        .zip(theta_end)
        .map(|(&a, &b)| scale * (a - b))
        .collect();
    Ok((numer / denom, grad))
}
