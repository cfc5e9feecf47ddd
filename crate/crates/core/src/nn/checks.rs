#![cfg(test)]
//! Finite-difference checks for every hand-written backward pass.

use super::*;
use crate::rng_for;
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

fn rand4(shape: (usize, usize, usize, usize), rng: &mut impl Rng) -> Array4<f64> {
    let d = Uniform::new(-1.0f64, 1.0).unwrap();
    Array4::from_shape_simple_fn(shape, || d.sample(rng))
}

/// Central finite difference of scalar_fn wrt one input element.
fn fd(mut scalar_fn: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    let h = 1e-5;
    (scalar_fn(x0 + h) - scalar_fn(x0 - h)) / (2.0 * h)
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs().max(n.abs()).max(1e-6)))
        .fold(0.0, f64::max)
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = rng_for(7, "gradcheck-conv");
    let x = rand4((2, 3, 6, 6), &mut rng);
    let make = |rng: &mut rand_chacha::ChaCha8Rng| Conv2d::<f64>::new(3, 4, 3, 1, 1, rng);

    // loss = sum of squares of output
    let loss_of = |conv: &mut Conv2d<f64>, x: &Array4<f64>| -> f64 {
        let y = conv.forward(x);
        y.iter().map(|v| v * v).sum()
    };

    let mut conv = make(&mut rng_for(7, "gradcheck-conv-w"));
    let y = conv.forward(&x);
    let grad_y = y.mapv(|v| 2.0 * v);
    let dx = conv.backward(&grad_y);

    // input gradient, spot-check 20 elements
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let idxs: Vec<usize> = (0..x.len()).step_by(x.len() / 20).collect();
    let flat = x.as_slice().unwrap().to_vec();
    for &i in &idxs {
        analytic.push(dx.as_slice().unwrap()[i]);
        let n = fd(
            |v| {
                let mut xp = flat.clone();
                xp[i] = v;
                let xp = Array4::from_shape_vec(x.raw_dim(), xp).unwrap();
                let mut c = make(&mut rng_for(7, "gradcheck-conv-w"));
                loss_of(&mut c, &xp)
            },
            flat[i],
        );
        numeric.push(n);
    }
    assert!(max_rel_err(&analytic, &numeric) < 1e-5, "conv dx check failed");

    // weight gradient
    let wflat = conv.weight.value.as_slice().unwrap().to_vec();
    let mut wa = Vec::new();
    let mut wn = Vec::new();
    for &i in &[0usize, 5, 17, 31, wflat.len() - 1] {
        wa.push(conv.weight.grad.as_slice().unwrap()[i]);
        wn.push(fd(
            |v| {
                let mut c = make(&mut rng_for(7, "gradcheck-conv-w"));
                c.weight.value.as_slice_mut().unwrap()[i] = v;
                loss_of(&mut c, &x)
            },
            wflat[i],
        ));
    }
    assert!(max_rel_err(&wa, &wn) < 1e-5, "conv dw check failed");
}

#[test]
fn conv2d_stride2_gradients() {
    let mut rng = rng_for(9, "gradcheck-conv-s2");
    let x = rand4((1, 2, 8, 8), &mut rng);
    let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng_for(9, "w"));
    let y = conv.forward(&x);
    assert_eq!(y.dim(), (1, 3, 4, 4));
    let grad_y = y.mapv(|v| 2.0 * v);
    let dx = conv.backward(&grad_y);
    let flat = x.as_slice().unwrap().to_vec();
    for &i in &[0usize, 13, 60, 127] {
        let n = fd(
            |v| {
                let mut xp = flat.clone();
                xp[i] = v;
                let xp = Array4::from_shape_vec(x.raw_dim(), xp).unwrap();
                let mut c = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng_for(9, "w"));
                let y = c.forward(&xp);
                y.iter().map(|v| v * v).sum()
            },
            flat[i],
        );
        let a = dx.as_slice().unwrap()[i];
        assert!((a - n).abs() / n.abs().max(1e-6) < 1e-5, "stride-2 dx at {i}: {a} vs {n}");
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = rng_for(3, "gradcheck-linear");
    let d = Uniform::new(-1.0f64, 1.0).unwrap();
    let x = Array2::from_shape_simple_fn((4, 5), || d.sample(&mut rng));
    let mut lin = Linear::<f64>::new(5, 3, &mut rng_for(3, "w"));
    let y = lin.forward(&x);
    let grad_y = y.mapv(|v| 2.0 * v);
    let dx = lin.backward(&grad_y);
    let flat = x.as_slice().unwrap().to_vec();
    for &i in &[0usize, 7, 19] {
        let n = fd(
            |v| {
                let mut xp = flat.clone();
                xp[i] = v;
                let xp = Array2::from_shape_vec(x.raw_dim(), xp).unwrap();
                let mut l = Linear::<f64>::new(5, 3, &mut rng_for(3, "w"));
                let y = l.forward(&xp);
                y.iter().map(|v| v * v).sum()
            },
            flat[i],
        );
        let a = dx.as_slice().unwrap()[i];
        assert!((a - n).abs() / n.abs().max(1e-6) < 1e-6, "linear dx at {i}");
    }
}

#[test]
fn pooling_and_upsample_roundtrip_gradients() {
    let mut rng = rng_for(5, "gradcheck-pool");
    let x = rand4((2, 2, 4, 4), &mut rng);
    let mut pool = AvgPool2::new();
    let y = pool.forward(&x);
    assert_eq!(y.dim(), (2, 2, 2, 2));
    let g = Array4::from_elem((2, 2, 2, 2), 1.0);
    let dx = pool.backward::<f64>(&g);
    // each input element receives 1/4
    assert!(dx.iter().all(|&v| (v - 0.25).abs() < 1e-12));

    let mut up = Upsample2::new();
    let yu = up.forward(&x);
    assert_eq!(yu.dim(), (2, 2, 8, 8));
    let gu = Array4::from_elem((2, 2, 8, 8), 1.0);
    let dxu = up.backward::<f64>(&gu);
    assert!(dxu.iter().all(|&v| (v - 4.0).abs() < 1e-12));
}

#[test]
fn relu_and_sigmoid_backward() {
    let x = Array4::from_shape_vec((1, 1, 2, 2), vec![-1.0f64, 0.5, 2.0, -0.1]).unwrap();
    let mut relu = Relu::new();
    let y = relu.forward(&x);
    assert_eq!(y.as_slice().unwrap(), &[0.0, 0.5, 2.0, 0.0]);
    let g = Array4::from_elem((1, 1, 2, 2), 1.0);
    let dx = relu.backward(&g);
    assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0, 1.0, 0.0]);

    let mut sig = Sigmoid::new();
    let y = sig.forward(&x);
    let dx = sig.backward(&g);
    for (&yi, &di) in y.iter().zip(dx.iter()) {
        assert!((di - yi * (1.0 - yi)).abs() < 1e-12);
    }
}

#[test]
fn softmax_cross_entropy_gradient() {
    let logits = Array2::from_shape_vec((2, 3), vec![0.2, -0.4, 1.1, 0.0, 0.0, 0.0]).unwrap();
    let targets = loss::one_hot::<f64>(&[2, 0], 3);
    let (l0, grad) = loss::cross_entropy_logits(&logits, &targets);
    assert!(l0 > 0.0);
    let flat = logits.as_slice().unwrap().to_vec();
    for i in 0..flat.len() {
        let h = 1e-6;
        let eval = |v: f64| {
            let mut lp = flat.clone();
            lp[i] = v;
            let lp = Array2::from_shape_vec((2, 3), lp).unwrap();
            loss::cross_entropy_logits(&lp, &targets).0
        };
        let n = (eval(flat[i] + h) - eval(flat[i] - h)) / (2.0 * h);
        let a = grad.as_slice().unwrap()[i];
        assert!((a - n).abs() < 1e-6, "ce grad at {i}: {a} vs {n}");
    }
}

#[test]
fn uniform_distribution_entropy_is_ln_k() {
    let p = Array1::from_elem(10, 0.1f64);
    assert!((loss::entropy(&p) - 10f64.ln()).abs() < 1e-9);
    let mut q = Array1::zeros(10);
    q[3] = 1.0f64;
    assert!(loss::entropy(&q).abs() < 1e-9);
}
