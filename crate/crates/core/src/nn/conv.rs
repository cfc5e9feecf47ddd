//! 2-D convolution with explicit im2col forward and backward passes.

use super::init::kaiming_uniform;
use super::param::Param;
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};
use rand::Rng;

/// Standard 2-D convolution, NCHW layout.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub weight: Param<F>, // (out_ch, in_ch * k * k)
    pub bias: Param<F>,   // (out_ch,)
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cached_cols: Option<Array2<F>>,
    cached_in_shape: (usize, usize, usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = Param::new(kaiming_uniform(&[out_ch, fan_in], fan_in, rng));
        let bias = Param::new(kaiming_uniform(&[out_ch], fan_in, rng));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            cached_cols: None,
            cached_in_shape: (0, 0, 0, 0),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &Array4<F>) -> Array2<F> {
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        let s = self.stride;
        let p = self.pad as isize;
        let (oh, ow) = self.out_hw(h, w);
        let mut cols = Array2::<F>::zeros((n * oh * ow, c * k * k));
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().expect("contiguous input");
        let cs = cols.as_slice_mut().expect("contiguous cols");
        let row_len = c * k * k;
        for ni in 0..n {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let r = ((ni * oh + ohi) * ow + owi) * row_len;
                    for ci in 0..c {
                        for ki in 0..k {
                            let ih = (ohi * s + ki) as isize - p;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src_base = ((ni * c + ci) * h + ih as usize) * w;
                            let dst_base = r + (ci * k + ki) * k;
                            for kj in 0..k {
                                let iw = (owi * s + kj) as isize - p;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                cs[dst_base + kj] = xs[src_base + iw as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>, in_shape: (usize, usize, usize, usize)) -> Array4<F> {
        let (n, c, h, w) = in_shape;
        let k = self.kernel;
        let s = self.stride;
        let p = self.pad as isize;
        let (oh, ow) = self.out_hw(h, w);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        let ds = dcols.as_slice().expect("contiguous dcols");
        let xs = dx.as_slice_mut().expect("contiguous dx");
        let row_len = c * k * k;
        for ni in 0..n {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let r = ((ni * oh + ohi) * ow + owi) * row_len;
                    for ci in 0..c {
                        for ki in 0..k {
                            let ih = (ohi * s + ki) as isize - p;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let dst_base = ((ni * c + ci) * h + ih as usize) * w;
                            let src_base = r + (ci * k + ki) * k;
                            for kj in 0..k {
                                let iw = (owi * s + kj) as isize - p;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                xs[dst_base + iw as usize] += ds[src_base + kj];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Forward pass; caches the im2col matrix for backward.
    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let wmat = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        // (n*oh*ow, fan_in) x (fan_in, out_ch)
        let mut y2 = cols.dot(&wmat.t());
        let b = &self.bias.value;
        for mut row in y2.rows_mut() {
            for (o, v) in row.iter_mut().enumerate() {
                *v += b[o];
            }
        }
        self.cached_cols = Some(cols);
        self.cached_in_shape = (n, c, h, w);
        // (n*oh*ow, out_ch) -> (n, out_ch, oh, ow)
        let y = y2
            .into_shape_with_order((n, oh, ow, self.out_ch))
            .unwrap()
            .permuted_axes([0, 3, 1, 2]);
        y.as_standard_layout().to_owned()
    }

    /// Backward pass: accumulates weight/bias grads, returns grad wrt input.
    pub fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let (n, oc, oh, ow) = grad_out.dim();
        assert_eq!(oc, self.out_ch);
        let cols = self.cached_cols.take().expect("forward before backward");
        // (n, oc, oh, ow) -> (n*oh*ow, oc)
        let g2 = grad_out
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((n * oh * ow, oc))
            .unwrap();
        // dW = g2^T . cols
        let dw = g2.t().dot(&cols);
        {
            let mut wgrad = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            wgrad += &dw;
        }
        let db = g2.sum_axis(ndarray::Axis(0));
        {
            let mut bgrad = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            bgrad += &db;
        }
        let wmat = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let dcols = g2.dot(&wmat);
        self.col2im(&dcols, self.cached_in_shape)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
