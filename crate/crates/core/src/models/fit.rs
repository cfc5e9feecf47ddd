//! Shared supervised training loop for classifiers.

use super::cnn::Classifier;
use crate::error::{Error, Result};
use crate::nn::loss::cross_entropy_logits;
use crate::nn::optim::{Adam, Sgd};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainCfg {
    fn default() -> Self {
        // batch size 64 / lr 0.01 are the victim-training defaults
        Self { epochs: 30, batch_size: 64, learning_rate: 0.01, optimizer: OptimizerKind::Adam }
    }
}

enum Opt<F: Scalar> {
    Adam(Adam<F>),
    Sgd(Sgd<F>),
}

/// Select batch rows from a 4-D image tensor.
pub fn select_batch<F: Scalar>(xs: &Array4<F>, idx: &[usize]) -> Array4<F> {
    let (_, c, h, w) = xs.dim();
    let mut out = Array4::zeros((idx.len(), c, h, w));
    for (bi, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), bi).assign(&xs.index_axis(Axis(0), i));
    }
    out
}

/// Select batch rows from a 2-D target matrix.
pub fn select_rows<F: Scalar>(ys: &Array2<F>, idx: &[usize]) -> Array2<F> {
    let k = ys.ncols();
    let mut out = Array2::zeros((idx.len(), k));
    for (bi, &i) in idx.iter().enumerate() {
        out.row_mut(bi).assign(&ys.row(i));
    }
    out
}

/// Train a classifier on (images, soft targets). Calls `on_step` after every
/// optimizer step (used for expert-trajectory snapshots). Returns per-epoch
/// mean losses.
pub fn fit<F: Scalar, R: Rng>(
    model: &mut Classifier<F>,
    xs: &Array4<F>,
    ys: &Array2<F>,
    cfg: &TrainCfg,
    rng: &mut R,
    mut on_step: impl FnMut(usize, &mut Classifier<F>),
) -> Result<Vec<f64>> {
    let n = xs.dim().0;
    assert_eq!(n, ys.nrows(), "image/target count mismatch");
    let mut opt = match cfg.optimizer {
        OptimizerKind::Adam => Opt::Adam(Adam::new(F::from_f64_(cfg.learning_rate))),
        OptimizerKind::Sgd => Opt::Sgd(Sgd::new(F::from_f64_(cfg.learning_rate))),
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let bx = select_batch(xs, chunk);
            let by = select_rows(ys, chunk);
            let logits = model.logits(&bx);
            let (loss, grad) = cross_entropy_logits(&logits, &by);
            let loss = loss.to_f64_();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { context: "epoch", index: epoch });
            }
            model.zero_grads();
            model.backward(&grad);
            match &mut opt {
                Opt::Adam(o) => o.step(&mut model.params_mut()),
                Opt::Sgd(o) => o.step(&mut model.params_mut()),
            }
            step += 1;
            on_step(step, model);
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Batched softmax predictions.
pub fn predict_probs<F: Scalar>(model: &mut Classifier<F>, xs: &Array4<F>) -> Array2<F> {
    let n = xs.dim().0;
    let k = model.num_classes;
    let mut out = Array2::zeros((n, k));
    let chunk = 128;
    let mut i = 0;
    while i < n {
        let j = (i + chunk).min(n);
        let idx: Vec<usize> = (i..j).collect();
        let bx = select_batch(xs, &idx);
        let logits = model.logits(&bx);
        let probs = crate::nn::loss::softmax(&logits);
        out.slice_mut(ndarray::s![i..j, ..]).assign(&probs);
        i = j;
    }
    out
}

/// Top-1 accuracy against hard labels.
pub fn accuracy<F: Scalar>(model: &mut Classifier<F>, xs: &Array4<F>, labels: &[usize]) -> f64 {
    let probs = predict_probs(model, xs);
    let mut correct = 0usize;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == y {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}
