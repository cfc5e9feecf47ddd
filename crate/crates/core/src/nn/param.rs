//! Learnable parameter container.

use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};

/// A learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Flatten a parameter list into one contiguous vector (snapshot order is the
/// declaration order of the model).
pub fn flatten_values<F: Scalar>(params: &[&Param<F>]) -> Vec<F> {
    let mut out = Vec::with_capacity(params.iter().map(|p| p.len()).sum());
    for p in params {
        out.extend(p.value.iter().copied());
    }
    out
}

/// Write a flat vector back into a parameter list. Panics on length mismatch.
pub fn unflatten_values<F: Scalar>(params: &mut [&mut Param<F>], flat: &[F]) {
    let total: usize = params.iter().map(|p| p.len()).sum();
    assert_eq!(total, flat.len(), "flat parameter vector length mismatch");
    let mut off = 0;
    for p in params.iter_mut() {
        let n = p.len();
        for (dst, src) in p.value.iter_mut().zip(&flat[off..off + n]) {
            *dst = *src;
        }
        off += n;
    }
}
