//! Parameter-free layers: activations, pooling, upsampling.

use crate::scalar::Scalar;
use ndarray::Array4;

/// ReLU over a 4-D activation tensor.
#[derive(Debug, Clone, Default)]
pub struct Relu<F: Scalar> {
    mask: Option<Array4<F>>,
}

impl<F: Scalar> Relu<F> {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = x.mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.mask = Some(x.mapv(|v| if v > F::zero() { F::one() } else { F::zero() }));
        y
    }

    pub fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let m = self.mask.take().expect("forward before backward");
        grad_out * &m
    }
}

/// Sigmoid head (keeps outputs in (0,1), differentiable clamp).
#[derive(Debug, Clone, Default)]
pub struct Sigmoid<F: Scalar> {
    out: Option<Array4<F>>,
}

impl<F: Scalar> Sigmoid<F> {
    pub fn new() -> Self {
        Self { out: None }
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = x.mapv(|v| F::one() / (F::one() + (-v).exp()));
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let y = self.out.take().expect("forward before backward");
        let dydx = y.mapv(|v| v * (F::one() - v));
        grad_out * &dydx
    }
}

/// 2x2 average pooling, stride 2.
#[derive(Debug, Clone, Default)]
pub struct AvgPool2 {
    in_shape: (usize, usize, usize, usize),
}

impl AvgPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<F: Scalar>(&mut self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool needs even spatial dims");
        self.in_shape = (n, c, h, w);
        let quarter = F::from_f64_(0.25);
        let mut y = Array4::<F>::zeros((n, c, h / 2, w / 2));
        for ni in 0..n {
            for ci in 0..c {
                for oh in 0..h / 2 {
                    for ow in 0..w / 2 {
                        let s = x[[ni, ci, 2 * oh, 2 * ow]]
                            + x[[ni, ci, 2 * oh, 2 * ow + 1]]
                            + x[[ni, ci, 2 * oh + 1, 2 * ow]]
                            + x[[ni, ci, 2 * oh + 1, 2 * ow + 1]];
                        y[[ni, ci, oh, ow]] = s * quarter;
                    }
                }
            }
        }
        y
    }

    pub fn backward<F: Scalar>(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = self.in_shape;
        let quarter = F::from_f64_(0.25);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for oh in 0..h / 2 {
                    for ow in 0..w / 2 {
                        let g = grad_out[[ni, ci, oh, ow]] * quarter;
                        dx[[ni, ci, 2 * oh, 2 * ow]] = g;
                        dx[[ni, ci, 2 * oh, 2 * ow + 1]] = g;
                        dx[[ni, ci, 2 * oh + 1, 2 * ow]] = g;
                        dx[[ni, ci, 2 * oh + 1, 2 * ow + 1]] = g;
                    }
                }
            }
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
#[derive(Debug, Clone, Default)]
pub struct Upsample2;

impl Upsample2 {
    pub fn new() -> Self {
        Self
    }

    pub fn forward<F: Scalar>(&mut self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let mut y = Array4::<F>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for ih in 0..h {
                    for iw in 0..w {
                        let v = x[[ni, ci, ih, iw]];
                        y[[ni, ci, 2 * ih, 2 * iw]] = v;
                        y[[ni, ci, 2 * ih, 2 * iw + 1]] = v;
                        y[[ni, ci, 2 * ih + 1, 2 * iw]] = v;
                        y[[ni, ci, 2 * ih + 1, 2 * iw + 1]] = v;
                    }
                }
            }
        }
        y
    }

    pub fn backward<F: Scalar>(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let (n, c, h2, w2) = grad_out.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for ih in 0..h {
                    for iw in 0..w {
                        dx[[ni, ci, ih, iw]] = grad_out[[ni, ci, 2 * ih, 2 * iw]]
                            + grad_out[[ni, ci, 2 * ih, 2 * iw + 1]]
                            + grad_out[[ni, ci, 2 * ih + 1, 2 * iw]]
                            + grad_out[[ni, ci, 2 * ih + 1, 2 * iw + 1]];
                    }
                }
            }
        }
        dx
    }
}
