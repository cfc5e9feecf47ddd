//! Dual-encoder / single-decoder U-Net.
//!
//! Two encoders process the original and hijack images; their bottlenecks are
//! concatenated along the channel axis as the decoder input. Skip connections
//! come from the original-image encoder only, which biases the output toward
//! visual fidelity. The sigmoid head keeps outputs in (0,1).

use crate::error::{Error, Result};
use crate::nn::{AvgPool2, Conv2d, Param, Relu, Sigmoid, Upsample2};
use crate::scalar::Scalar;
use ndarray::{s, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct UnetConfig {
    /// Number of 2x downsampling steps.
    pub depth: usize,
    /// Channel width at the top level; level i uses base_width * 2^min(i,2).
    pub base_width: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { depth: 3, base_width: 32 }
    }
}

impl UnetConfig {
    pub fn level_channels(&self, i: usize) -> usize {
        self.base_width * (1 << i.min(2))
    }
}

#[derive(Debug, Clone)]
struct EncLevel<F: Scalar> {
    conv: Conv2d<F>,
    relu: Relu<F>,
    pool: AvgPool2,
}

#[derive(Debug, Clone)]
struct DecLevel<F: Scalar> {
    conv: Conv2d<F>,
    relu: Relu<F>,
    up: Upsample2,
}

/// The dual-encoder U-Net generator.
#[derive(Debug, Clone)]
pub struct Unet<F: Scalar> {
    pub cfg: UnetConfig,
    pub resolution: usize,
    enc_o: Vec<EncLevel<F>>,
    enc_h: Vec<EncLevel<F>>,
    bott_o: (Conv2d<F>, Relu<F>),
    bott_h: (Conv2d<F>, Relu<F>),
    dec: Vec<DecLevel<F>>, // stored top-down (level 0 first); executed bottom-up
    head: Conv2d<F>,
    out_act: Sigmoid<F>,
}

fn concat_channels<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat")
}

impl<F: Scalar> Unet<F> {
    /// Build a U-Net for square images of the given resolution.
    pub fn new<R: Rng>(resolution: usize, cfg: UnetConfig, rng: &mut R) -> Result<Self> {
        let max_depth = resolution.trailing_zeros() as usize;
        if cfg.depth == 0 || resolution % (1 << cfg.depth) != 0 {
            return Err(Error::IndivisibleResolution {
                res: resolution,
                depth: cfg.depth,
                max_depth,
            });
        }
        let d = cfg.depth;
        let mut enc_o = Vec::new();
        let mut enc_h = Vec::new();
        let mut in_ch = 3;
        for i in 0..d {
            let out_ch = cfg.level_channels(i);
            enc_o.push(EncLevel {
                conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng),
                relu: Relu::new(),
                pool: AvgPool2::new(),
            });
            enc_h.push(EncLevel {
                conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng),
                relu: Relu::new(),
                pool: AvgPool2::new(),
            });
            in_ch = out_ch;
        }
        let cb = cfg.level_channels(d.saturating_sub(1));
        let bott_o = (Conv2d::new(in_ch, cb, 3, 1, 1, rng), Relu::new());
        let bott_h = (Conv2d::new(in_ch, cb, 3, 1, 1, rng), Relu::new());
        // decoder level i consumes 2*c_{i+1} channels (or 2*cb at the bottom)
        let mut dec = Vec::new();
        for i in 0..d {
            let in_c = if i == d - 1 { 2 * cb } else { 2 * cfg.level_channels(i + 1) };
            dec.push(DecLevel {
                conv: Conv2d::new(in_c, cfg.level_channels(i), 3, 1, 1, rng),
                relu: Relu::new(),
                up: Upsample2::new(),
            });
        }
        let head = Conv2d::new(2 * cfg.level_channels(0), 3, 3, 1, 1, rng);
        Ok(Self {
            cfg,
            resolution,
            enc_o,
            enc_h,
            bott_o,
            bott_h,
            dec,
            head,
            out_act: Sigmoid::new(),
        })
    }

    /// Forward pass: (x_o, x_h) -> osmosis image batch in (0,1).
    pub fn forward(&mut self, x_o: &Array4<F>, x_h: &Array4<F>) -> Array4<F> {
        assert_eq!(x_o.dim(), x_h.dim(), "encoder input shapes must match");
        let d = self.cfg.depth;
        let mut skips = Vec::with_capacity(d);
        let mut zo = x_o.clone();
        for lvl in &mut self.enc_o {
            let a = lvl.relu.forward(&lvl.conv.forward(&zo));
            zo = lvl.pool.forward(&a);
            skips.push(a);
        }
        let mut zh = x_h.clone();
        for lvl in &mut self.enc_h {
            let a = lvl.relu.forward(&lvl.conv.forward(&zh));
            zh = lvl.pool.forward(&a);
        }
        let bo = self.bott_o.1.forward(&self.bott_o.0.forward(&zo));
        let bh = self.bott_h.1.forward(&self.bott_h.0.forward(&zh));
        let mut z = concat_channels(&bo, &bh);
        for i in (0..d).rev() {
            let lvl = &mut self.dec[i];
            let a = lvl.relu.forward(&lvl.conv.forward(&z));
            let u = lvl.up.forward(&a);
            z = concat_channels(&u, &skips[i]);
        }
        self.out_act.forward(&self.head.forward(&z))
    }

    /// Backward pass; returns (grad wrt x_o, grad wrt x_h).
    pub fn backward(&mut self, grad_out: &Array4<F>) -> (Array4<F>, Array4<F>) {
        let d = self.cfg.depth;
        let g = self.out_act.backward(grad_out);
        let mut g = self.head.backward(&g);
        let mut skip_grads: Vec<Option<Array4<F>>> = vec![None; d];
        for i in 0..d {
            let c = self.cfg.level_channels(i);
            let gz = g.slice(s![.., ..c, .., ..]).to_owned();
            let gskip = g.slice(s![.., c.., .., ..]).to_owned();
            skip_grads[i] = Some(gskip);
            let lvl = &mut self.dec[i];
            let gu = lvl.up.backward(&gz);
            let ga = lvl.relu.backward(&gu);
            g = lvl.conv.backward(&ga);
        }
        let cb = g.dim().1 / 2;
        let gbo = g.slice(s![.., ..cb, .., ..]).to_owned();
        let gbh = g.slice(s![.., cb.., .., ..]).to_owned();

        let mut go = self.bott_o.0.backward(&self.bott_o.1.backward(&gbo));
        for i in (0..d).rev() {
            let lvl = &mut self.enc_o[i];
            let mut ga = lvl.pool.backward(&go);
            ga = ga + skip_grads[i].take().expect("skip grad");
            let gr = lvl.relu.backward(&ga);
            go = lvl.conv.backward(&gr);
        }
        let mut gh = self.bott_h.0.backward(&self.bott_h.1.backward(&gbh));
        for i in (0..d).rev() {
            let lvl = &mut self.enc_h[i];
            let ga = lvl.pool.backward(&gh);
            let gr = lvl.relu.backward(&ga);
            gh = lvl.conv.backward(&gr);
        }
        (go, gh)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for lvl in self.enc_o.iter_mut().chain(self.enc_h.iter_mut()) {
            out.extend(lvl.conv.params_mut());
        }
        out.extend(self.bott_o.0.params_mut());
        out.extend(self.bott_h.0.params_mut());
        for lvl in &mut self.dec {
            out.extend(lvl.conv.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        for lvl in self.enc_o.iter().chain(self.enc_h.iter()) {
            out.extend(lvl.conv.params());
        }
        out.extend(self.bott_o.0.params());
        out.extend(self.bott_h.0.params());
        for lvl in &self.dec {
            out.extend(lvl.conv.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Param<F>)> {
        let mut out = Vec::new();
        for (i, lvl) in self.enc_o.iter().enumerate() {
            out.push((format!("enc_o.{i}.weight"), &lvl.conv.weight));
            out.push((format!("enc_o.{i}.bias"), &lvl.conv.bias));
        }
        for (i, lvl) in self.enc_h.iter().enumerate() {
            out.push((format!("enc_h.{i}.weight"), &lvl.conv.weight));
            out.push((format!("enc_h.{i}.bias"), &lvl.conv.bias));
        }
        out.push(("bott_o.weight".into(), &self.bott_o.0.weight));
        out.push(("bott_o.bias".into(), &self.bott_o.0.bias));
        out.push(("bott_h.weight".into(), &self.bott_h.0.weight));
        out.push(("bott_h.bias".into(), &self.bott_h.0.bias));
        for (i, lvl) in self.dec.iter().enumerate() {
            out.push((format!("dec.{i}.weight"), &lvl.conv.weight));
            out.push((format!("dec.{i}.bias"), &lvl.conv.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out = Vec::new();
        for (i, lvl) in self.enc_o.iter_mut().enumerate() {
            out.push((format!("enc_o.{i}.weight"), &mut lvl.conv.weight));
            out.push((format!("enc_o.{i}.bias"), &mut lvl.conv.bias));
        }
        for (i, lvl) in self.enc_h.iter_mut().enumerate() {
            out.push((format!("enc_h.{i}.weight"), &mut lvl.conv.weight));
            out.push((format!("enc_h.{i}.bias"), &mut lvl.conv.bias));
        }
        out.push(("bott_o.weight".into(), &mut self.bott_o.0.weight));
        out.push(("bott_o.bias".into(), &mut self.bott_o.0.bias));
        out.push(("bott_h.weight".into(), &mut self.bott_h.0.weight));
        out.push(("bott_h.bias".into(), &mut self.bott_h.0.bias));
        for (i, lvl) in self.dec.iter_mut().enumerate() {
            out.push((format!("dec.{i}.weight"), &mut lvl.conv.weight));
            out.push((format!("dec.{i}.bias"), &mut lvl.conv.bias));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
