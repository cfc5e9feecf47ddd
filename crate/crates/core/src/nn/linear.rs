//! Fully connected layer over (N, D) activations.

use super::init::kaiming_uniform;
use super::param::Param;
use crate::scalar::Scalar;
use ndarray::Array2;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub weight: Param<F>, // (out, in)
    pub bias: Param<F>,   // (out,)
    pub in_dim: usize,
    pub out_dim: usize,
    cached_in: Option<Array2<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(kaiming_uniform(&[out_dim, in_dim], in_dim, rng)),
            bias: Param::new(kaiming_uniform(&[out_dim], in_dim, rng)),
            in_dim,
            out_dim,
            cached_in: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        assert_eq!(x.ncols(), self.in_dim, "linear input dim mismatch");
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = x.dot(&w.t());
        let b = &self.bias.value;
        for mut row in y.rows_mut() {
            for (o, v) in row.iter_mut().enumerate() {
                *v += b[o];
            }
        }
        self.cached_in = Some(x.clone());
        y
    }

    pub fn backward(&mut self, grad_out: &Array2<F>) -> Array2<F> {
        let x = self.cached_in.take().expect("forward before backward");
        let dw = grad_out.t().dot(&x);
        {
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            wg += &dw;
        }
        let db = grad_out.sum_axis(ndarray::Axis(0));
        {
            let mut bg = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            bg += &db;
        }
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        grad_out.dot(&w)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
