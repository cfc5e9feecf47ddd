//! Classification and reconstruction losses.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2};

/// Row-wise numerically stable softmax.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Softmax of a single logit vector.
pub fn softmax1<F: Scalar>(logits: &Array1<F>) -> Array1<F> {
    let mx = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out = logits.mapv(|v| (v - mx).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Cross-entropy of a probability vector against a target distribution,
/// -sum_k t_k ln p_k, with probabilities floored for stability.
pub fn cross_entropy_probs<F: Scalar>(probs: &Array1<F>, target: &Array1<F>) -> F {
    let floor = F::from_f64_(1e-12);
    probs
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| -t * p.max(floor).ln())
        .sum()
}

/// Mean soft-target cross-entropy over a batch of logits.
/// Returns (loss, grad wrt logits) where grad = (softmax - target) / batch.
pub fn cross_entropy_logits<F: Scalar>(
    logits: &Array2<F>,
    targets: &Array2<F>,
) -> (F, Array2<F>) {
    assert_eq!(logits.dim(), targets.dim(), "logits/targets shape mismatch");
    let n = logits.nrows();
    let probs = softmax(logits);
    let floor = F::from_f64_(1e-12);
    let mut loss = F::zero();
    for (prow, trow) in probs.rows().into_iter().zip(targets.rows()) {
        for (&p, &t) in prow.iter().zip(trow.iter()) {
            loss -= t * p.max(floor).ln();
        }
    }
    let inv_n = F::one() / F::from_f64_(n as f64);
    let grad = (&probs - targets) * inv_n;
    (loss * inv_n, grad)
}

/// One-hot target rows from class indices.
pub fn one_hot<F: Scalar>(labels: &[usize], num_classes: usize) -> Array2<F> {
    let mut t = Array2::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < num_classes, "label {y} out of range {num_classes}");
        t[[i, y]] = F::one();
    }
    t
}

/// Shannon entropy (natural log) of a probability vector.
pub fn entropy<F: Scalar>(probs: &Array1<F>) -> F {
    let floor = F::from_f64_(1e-12);
    -probs
        .iter()
        .map(|&p| if p > F::zero() { p * p.max(floor).ln() } else { F::zero() })
        .sum::<F>()
}
