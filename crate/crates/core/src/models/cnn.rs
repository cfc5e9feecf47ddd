//! Convolutional classifier family.
//!
//! One graph engine covers every classifier role in the pipeline: observer,
//! feature extractor, expert surrogate, and victim. A [`Classifier`] is a
//! conv backbone producing a flat feature vector (the penultimate layer)
//! followed by a linear head.

use crate::error::{Error, Result};
use crate::nn::{AvgPool2, Conv2d, Linear, Param, Relu};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Known victim / surrogate architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Resnet18,
    Vgg16,
    Densenet121,
    Mobilenetv3,
    ConvnextT,
    ToyCnn,
    /// Wider toy variant used for cross-architecture experiments.
    ToyCnnWide,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::Resnet18 => "resnet18",
            ArchId::Vgg16 => "vgg16",
            ArchId::Densenet121 => "densenet121",
            ArchId::Mobilenetv3 => "mobilenetv3",
            ArchId::ConvnextT => "convnext_t",
            ArchId::ToyCnn => "toy_cnn",
            ArchId::ToyCnnWide => "toy_cnn_wide",
        }
    }
}

impl std::str::FromStr for ArchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "resnet18" => ArchId::Resnet18,
            "vgg16" => ArchId::Vgg16,
            "densenet121" => ArchId::Densenet121,
            "mobilenetv3" => ArchId::Mobilenetv3,
            "convnext_t" => ArchId::ConvnextT,
            "toy_cnn" => ArchId::ToyCnn,
            "toy_cnn_wide" => ArchId::ToyCnnWide,
            other => return Err(Error::Config(format!("unknown architecture '{other}'"))),
        })
    }
}

/// One node of a conv backbone.
#[derive(Debug, Clone)]
pub enum ConvNode<F: Scalar> {
    Conv(Conv2d<F>),
    Relu(Relu<F>),
    Pool(AvgPool2),
    /// y = x + body(x); the body must preserve shape.
    Residual(Box<ConvStack<F>>),
}

/// Sequential stack of conv nodes, NCHW in and out.
#[derive(Debug, Clone, Default)]
pub struct ConvStack<F: Scalar> {
    pub nodes: Vec<ConvNode<F>>,
}

impl<F: Scalar> ConvStack<F> {
    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let mut cur = x.clone();
        for node in &mut self.nodes {
            cur = match node {
                ConvNode::Conv(c) => c.forward(&cur),
                ConvNode::Relu(r) => r.forward(&cur),
                ConvNode::Pool(p) => p.forward(&cur),
                ConvNode::Residual(body) => {
                    let y = body.forward(&cur);
                    &y + &cur
                }
            };
        }
        cur
    }

    pub fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let mut g = grad_out.clone();
        for node in self.nodes.iter_mut().rev() {
            g = match node {
                ConvNode::Conv(c) => c.backward(&g),
                ConvNode::Relu(r) => r.backward(&g),
                ConvNode::Pool(p) => p.backward(&g),
                ConvNode::Residual(body) => {
                    let gb = body.backward(&g);
                    &gb + &g
                }
            };
        }
        g
    }

    pub fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                ConvNode::Conv(c) => {
                    out.push((format!("{prefix}.{i}.weight"), &c.weight));
                    out.push((format!("{prefix}.{i}.bias"), &c.bias));
                }
                ConvNode::Residual(body) => {
                    body.named_params(&format!("{prefix}.{i}"), out);
                }
                _ => {}
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match node {
                ConvNode::Conv(c) => out.extend(c.params_mut()),
                ConvNode::Residual(body) => out.extend(body.params_mut()),
                _ => {}
            }
        }
        out
    }

    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<F>)>,
    ) {
        for (i, node) in self.nodes.iter_mut().enumerate() {
            match node {
                ConvNode::Conv(c) => {
                    out.push((format!("{prefix}.{i}.weight"), &mut c.weight));
                    out.push((format!("{prefix}.{i}.bias"), &mut c.bias));
                }
                ConvNode::Residual(body) => {
                    body.named_params_mut(&format!("{prefix}.{i}"), out);
                }
                _ => {}
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node {
                ConvNode::Conv(c) => out.extend(c.params()),
                ConvNode::Residual(body) => out.extend(body.params()),
                _ => {}
            }
        }
        out
    }
}

/// Conv backbone + linear head. `features` taps the penultimate layer.
#[derive(Debug, Clone)]
pub struct Classifier<F: Scalar> {
    pub arch: ArchId,
    pub backbone: ConvStack<F>,
    pub head: Linear<F>,
    pub feat_dim: usize,
    pub num_classes: usize,
    pub resolution: usize,
    cached_feat_shape: (usize, usize, usize, usize),
}

impl<F: Scalar> Classifier<F> {
    /// Penultimate-layer activations, (N, feat_dim).
    pub fn features(&mut self, x: &Array4<F>) -> Array2<F> {
        let f = self.backbone.forward(x);
        let (n, c, h, w) = f.dim();
        self.cached_feat_shape = (n, c, h, w);
        f.into_shape_with_order((n, c * h * w)).unwrap()
    }

    /// Full forward pass to logits.
    pub fn logits(&mut self, x: &Array4<F>) -> Array2<F> {
        let f = self.features(x);
        self.head.forward(&f)
    }

    /// Backward from logit gradients through head and backbone; returns input grads.
    pub fn backward(&mut self, grad_logits: &Array2<F>) -> Array4<F> {
        let gf = self.head.backward(grad_logits);
        self.backward_from_features(&gf)
    }

    /// Backward from feature gradients through the backbone only.
    pub fn backward_from_features(&mut self, grad_feat: &Array2<F>) -> Array4<F> {
        let shape = self.cached_feat_shape;
        let g4 = grad_feat
            .clone()
            .into_shape_with_order(shape)
            .expect("feature gradient shape");
        self.backbone.backward(&g4)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = self.backbone.params_mut();
        out.extend(self.head.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = self.backbone.params();
        out.extend(self.head.params());
        out
    }

    /// Stable (name, param) listing used by the checkpoint format.
    pub fn named_params(&self) -> Vec<(String, &Param<F>)> {
        let mut out = Vec::new();
        self.backbone.named_params("backbone", &mut out);
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out = Vec::new();
        self.backbone.named_params_mut("backbone", &mut out);
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

fn conv<F: Scalar, R: Rng>(i: usize, o: usize, stride: usize, rng: &mut R) -> ConvNode<F> {
    ConvNode::Conv(Conv2d::new(i, o, 3, stride, 1, rng))
}

fn relu<F: Scalar>() -> ConvNode<F> {
    ConvNode::Relu(Relu::new())
}

fn pool<F: Scalar>() -> ConvNode<F> {
    ConvNode::Pool(AvgPool2::new())
}

fn res_block<F: Scalar, R: Rng>(ch: usize, rng: &mut R) -> ConvNode<F> {
    ConvNode::Residual(Box::new(ConvStack {
        nodes: vec![conv(ch, ch, 1, rng), relu(), conv(ch, ch, 1, rng)],
    }))
}

/// Build a classifier for the given architecture at a square input resolution.
pub fn build_classifier<F: Scalar, R: Rng>(
    arch: ArchId,
    num_classes: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<Classifier<F>> {
    let (nodes, feat_dim) = match arch {
        ArchId::ToyCnn => {
            let nodes = vec![
                conv(3, 16, 1, rng),
                relu(),
                pool(),
                conv(16, 32, 1, rng),
                relu(),
                pool(),
                conv(32, 32, 1, rng),
                relu(),
                pool(),
            ];
            let side = resolution / 8;
            (nodes, 32 * side * side)
        }
        ArchId::ToyCnnWide => {
            let nodes = vec![
                conv(3, 24, 1, rng),
                relu(),
                pool(),
                conv(24, 48, 1, rng),
                relu(),
                pool(),
                conv(48, 48, 1, rng),
                relu(),
                pool(),
                conv(48, 48, 1, rng),
                relu(),
            ];
            let side = resolution / 8;
            (nodes, 48 * side * side)
        }
        ArchId::Resnet18 => {
            let mut nodes = vec![conv(3, 64, 1, rng), relu()];
            nodes.push(res_block(64, rng));
            nodes.push(res_block(64, rng));
            nodes.push(conv(64, 128, 2, rng));
            nodes.push(relu());
            nodes.push(res_block(128, rng));
            nodes.push(res_block(128, rng));
            nodes.push(conv(128, 256, 2, rng));
            nodes.push(relu());
            nodes.push(res_block(256, rng));
            nodes.push(res_block(256, rng));
            nodes.push(conv(256, 512, 2, rng));
            nodes.push(relu());
            nodes.push(res_block(512, rng));
            nodes.push(res_block(512, rng));
            // reduce the remaining spatial extent to 1x1
            let mut side = resolution / 8;
            while side > 1 {
                nodes.push(pool());
                side /= 2;
            }
            (nodes, 512)
        }
        ArchId::Vgg16 => {
            let plan: &[(usize, usize)] = &[(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
            let mut nodes = Vec::new();
            let mut in_ch = 3;
            let mut side = resolution;
            for &(ch, reps) in plan {
                for _ in 0..reps {
                    nodes.push(conv(in_ch, ch, 1, rng));
                    nodes.push(relu());
                    in_ch = ch;
                }
                if side > 1 {
                    nodes.push(pool());
                    side /= 2;
                }
            }
            (nodes, 512 * side * side)
        }
        ArchId::Densenet121 | ArchId::Mobilenetv3 | ArchId::ConvnextT => {
            return Err(Error::UnsupportedArch(arch.as_str().into()));
        }
    };
    Ok(Classifier {
        arch,
        backbone: ConvStack { nodes },
        head: Linear::new(feat_dim, num_classes, rng),
        feat_dim,
        num_classes,
        resolution,
        cached_feat_shape: (0, 0, 0, 0),
    })
}
