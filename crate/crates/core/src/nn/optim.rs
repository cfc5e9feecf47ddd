//! Optimizers over a model's parameter list.
//!
//! State is positional: the caller must pass parameters in the same order on
//! every step (models expose a stable `params_mut` order).

use super::param::Param;
use crate::scalar::Scalar;
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct Sgd<F: Scalar> {
    pub lr: F,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: F) -> Self {
        Self { lr }
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        for p in params.iter_mut() {
            let lr = self.lr;
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .for_each(|v, &g| *v = *v - lr * g);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step_count: usize,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: F) -> Self {
        Self {
            lr,
            beta1: F::from_f64_(0.9),
            beta2: F::from_f64_(0.999),
            eps: F::from_f64_(1e-8),
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(ArrayD::zeros(p.value.raw_dim()));
                self.v.push(ArrayD::zeros(p.value.raw_dim()));
            }
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state/param count mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (i, p) in params.iter_mut().enumerate() {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|val, &g, m, v| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *val = *val - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Zero every gradient in the list.
pub fn zero_grads<F: Scalar>(params: &mut [&mut Param<F>]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}
