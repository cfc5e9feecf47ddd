//! Unrolled student updates for trajectory matching, with exact reverse-mode
//! gradients.
//!
//! The student is the surrogate's linear head trained on the synthetic set's
//! frozen-backbone features z. Each inner step is a full-batch SGD update
//!   W_{j+1} = W_j - (eta/B) (p_j - y)^T z,  b_{j+1} = b_j - (eta/B) 1^T (p_j - y)
//! and the outer loss compares the final head against an expert snapshot.
//! Because the inner updates are closed-form in z, the gradient of the outer
//! loss with respect to z (and eta) can be accumulated step by step in
//! reverse, without building a second-order graph.

use super::trajectory::{trajectory_loss_grad, Head};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Axis};

/// Gradients of the matching loss with respect to the student inputs.
pub struct MatchingGrads<F: Scalar> {
    pub loss: f64,
    /// d loss / d features, shape (B, D).
    pub d_features: Array2<F>,
    /// d loss / d targets, shape (B, K).
    pub d_targets: Array2<F>,
    /// d loss / d synthetic learning rate.
    pub d_lr: f64,
}

struct StepRecord<F: Scalar> {
    w: Array2<F>,
    p: Array2<F>,
}

/// Run `steps` inner updates from the expert start snapshot and differentiate
/// the trajectory loss back to the synthetic features, targets, and learning
/// rate.
pub fn matching_loss_and_grads<F: Scalar>(
    z: &Array2<F>,
    y: &Array2<F>,
    syn_lr: f64,
    theta_start: &[F],
    theta_end: &[F],
    steps: usize,
) -> Result<MatchingGrads<F>> {
    let (batch, dim) = z.dim();
    let classes = y.dim().1;
    if y.dim().0 != batch {
        return Err(Error::ShapeMismatch {
            context: "matching targets".into(),
            expected: format!("{batch} rows"),
            got: format!("{}", y.dim().0),
        });
    }
    if steps == 0 {
        return Err(Error::Config("matching needs at least one student step".into()));
    }
    let eta = F::from_f64_(syn_lr);
    let inv_b = F::from_f64_(1.0 / batch as f64);

    // forward: unroll the student, keeping what the reverse pass needs
    let mut head = Head::from_flat(classes, dim, theta_start);
    let mut records: Vec<StepRecord<F>> = Vec::with_capacity(steps);
    for _ in 0..steps {
        let w_before = head.w.clone();
        let p = head.sgd_step(z, y, eta);
        if p.iter().any(|v| !v.to_f64_().is_finite()) {
            return Err(Error::NonFiniteLoss { context: "student unroll", index: records.len() });
        }
        records.push(StepRecord { w: w_before, p });
    }
    let theta_hat = head.flat();
    let (loss, grad_flat) = trajectory_loss_grad(&theta_hat, theta_start, theta_end)?;

    // reverse pass
    let mut g_w = Array2::from_shape_vec(
        (classes, dim),
        grad_flat[..classes * dim].to_vec(),
    )
    .unwrap();
    let mut g_b = Array1::from_vec(grad_flat[classes * dim..].to_vec());
    let mut d_z = Array2::<F>::zeros((batch, dim));
    let mut d_y = Array2::<F>::zeros((batch, classes));
    let mut d_lr = F::zero();
    for rec in records.iter().rev() {
        let err = &rec.p - y; // (B, K)
        // a_n = G_W z_n + G_b: directional derivative of the update wrt logits
        let a = z.dot(&g_w.t()) + &g_b; // (B, K)
        // d eta: the update subtracts (eta/B) err^T z, so
        // dL/d eta = -(1/B) sum_n err_n . a_n
        d_lr = d_lr - inv_b * (&err * &a).sum();
        // targets enter the update as -(eta/B)(p - y): dL/dy_n = +(eta/B) a_n
        d_y = d_y + &(&a * (eta * inv_b));
        // softmax jacobian: c_n = -(eta/B) (p (.) a - p (p.a))
        let pa_dot = (&rec.p * &a).sum_axis(Axis(1)); // (B,)
        let mut c = &rec.p * &a;
        for (mut row, (&s, p_row)) in c
            .rows_mut()
            .into_iter()
            .zip(pa_dot.iter().zip(rec.p.rows()))
        {
            ndarray::Zip::from(&mut row).and(&p_row).for_each(|cv, &pv| {
                *cv = -(eta * inv_b) * (*cv - pv * s);
            });
        }
        // z enters twice: through the logits (W_j^T c) and through the update
        // outer product (-(eta/B) err_n z_n^T contracted with G_W)
        d_z = d_z + &c.dot(&rec.w) - &(err.dot(&g_w) * (eta * inv_b));
        // carry gradients to the previous step's parameters
        g_w = g_w + &c.t().dot(z);
        g_b = g_b + &c.sum_axis(Axis(0));
    }
    Ok(MatchingGrads { loss, d_features: d_z, d_targets: d_y, d_lr: d_lr.to_f64_() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_for;
    use rand::Rng;

    struct Probe {
        z: Array2<f64>,
        y: Array2<f64>,
        start: Vec<f64>,
        end: Vec<f64>,
    }

    fn probe(batch: usize, dim: usize, classes: usize) -> Probe {
        let mut rng = rng_for(13, "match-probe");
        let z = Array2::from_shape_fn((batch, dim), |_| rng.random_range(-1.0..1.0));
        let mut y = Array2::zeros((batch, classes));
        for i in 0..batch {
            // soft-ish targets
            let main = i % classes;
            for k in 0..classes {
                y[[i, k]] = if k == main { 0.8 } else { 0.2 / (classes - 1) as f64 };
            }
        }
        let n_params = classes * dim + classes;
        let start: Vec<f64> = (0..n_params).map(|_| rng.random_range(-0.5..0.5)).collect();
        let end: Vec<f64> = (0..n_params).map(|_| rng.random_range(-0.5..0.5)).collect();
        Probe { z, y, start, end }
    }

    fn loss_of(p: &Probe, z: &Array2<f64>, y: &Array2<f64>, lr: f64, steps: usize) -> f64 {
        matching_loss_and_grads(z, y, lr, &p.start, &p.end, steps)
            .unwrap()
            .loss
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let p = probe(4, 5, 3);
        let steps = 3;
        let lr = 0.2;
        let g = matching_loss_and_grads(&p.z, &p.y, lr, &p.start, &p.end, steps).unwrap();
        let eps = 1e-6;
        for (i, j) in [(0, 0), (1, 3), (2, 4), (3, 2)] {
            let mut zp = p.z.clone();
            let mut zm = p.z.clone();
            zp[[i, j]] += eps;
            zm[[i, j]] -= eps;
            let fd = (loss_of(&p, &zp, &p.y, lr, steps) - loss_of(&p, &zm, &p.y, lr, steps))
                / (2.0 * eps);
            let a = g.d_features[[i, j]];
            let rel = (fd - a).abs() / a.abs().max(1e-8);
            assert!(rel < 1e-4, "z[{i},{j}]: fd {fd} vs analytic {a} (rel {rel})");
        }
    }

    #[test]
    fn target_gradient_matches_finite_differences() {
        let p = probe(4, 5, 3);
        let steps = 2;
        let lr = 0.3;
        let g = matching_loss_and_grads(&p.z, &p.y, lr, &p.start, &p.end, steps).unwrap();
        let eps = 1e-6;
        for (i, k) in [(0, 1), (2, 0), (3, 2)] {
            let mut yp = p.y.clone();
            let mut ym = p.y.clone();
            yp[[i, k]] += eps;
            ym[[i, k]] -= eps;
            let fd = (loss_of(&p, &p.z, &yp, lr, steps) - loss_of(&p, &p.z, &ym, lr, steps))
                / (2.0 * eps);
            let a = g.d_targets[[i, k]];
            let rel = (fd - a).abs() / a.abs().max(1e-8);
            assert!(rel < 1e-4, "y[{i},{k}]: fd {fd} vs analytic {a} (rel {rel})");
        }
    }

    #[test]
    fn learning_rate_gradient_matches_finite_differences() {
        let p = probe(6, 4, 2);
        let steps = 4;
        let lr = 0.15;
        let g = matching_loss_and_grads(&p.z, &p.y, lr, &p.start, &p.end, steps).unwrap();
        let eps = 1e-6;
        let fd = (loss_of(&p, &p.z, &p.y, lr + eps, steps)
            - loss_of(&p, &p.z, &p.y, lr - eps, steps))
            / (2.0 * eps);
        let rel = (fd - g.d_lr).abs() / g.d_lr.abs().max(1e-8);
        assert!(rel < 1e-4, "lr: fd {fd} vs analytic {} (rel {rel})", g.d_lr);
    }

    #[test]
    fn descending_the_feature_gradient_reduces_the_loss() {
        let p = probe(6, 5, 3);
        let lr = 0.2;
        let g = matching_loss_and_grads(&p.z, &p.y, lr, &p.start, &p.end, 3).unwrap();
        let step = 0.05;
        let z2 = &p.z - &(&g.d_features * (step / g.d_features.iter().fold(0.0f64, |m, &v| m.max(v.abs()))));
        let l2 = loss_of(&p, &z2, &p.y, lr, 3);
        assert!(l2 < g.loss, "loss {} -> {l2}", g.loss);
    }

    #[test]
    fn zero_steps_is_rejected() {
        let p = probe(2, 3, 2);
        assert!(matching_loss_and_grads(&p.z, &p.y, 0.1, &p.start, &p.end, 0).is_err());
    }
}
