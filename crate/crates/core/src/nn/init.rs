//! Weight initialization helpers.

use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Kaiming-style uniform init with bound sqrt(1 / fan_in).
pub fn kaiming_uniform<F: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<F> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(F::from_f64_(-bound), F::from_f64_(bound)).unwrap();
    let mut arr = ArrayD::zeros(IxDyn(shape));
    for v in arr.iter_mut() {
        *v = dist.sample(rng);
    }
    arr
}

/// Uniform init in [-bound, bound].
pub fn uniform<F: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<F> {
    let dist = Uniform::new_inclusive(F::from_f64_(-bound), F::from_f64_(bound)).unwrap();
    let mut arr = ArrayD::zeros(IxDyn(shape));
    for v in arr.iter_mut() {
        *v = dist.sample(rng);
    }
    arr
}
