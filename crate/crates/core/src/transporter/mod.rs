//! Dual-encoder generative model that blends an original-task image with a
//! hijack-task image into an osmosis sample: visually close to the former,
//! semantically close to the latter.

use crate::artifacts;
use crate::datasets::{pair_samples, LabelMapping, LoadedDataset};
use crate::error::{Error, Result};
use crate::models::{Classifier, OptimizerKind, TrainCfg, Unet, UnetConfig};
use crate::nn::{Adam, Sgd};
use crate::rng_for;
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

/// Weights of the visual and semantic loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    /// Weighted toward the visual term: the per-pixel L1 sits on a smaller
    /// numeric scale than the feature-space L1, and preserving the original
    /// task's visual cues is what keeps the victim's utility intact.
    fn default() -> Self {
        Self { lambda_v: 3.0, lambda_s: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_v < 0.0 || self.lambda_s < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got ({}, {})",
                self.lambda_v, self.lambda_s
            )));
        }
        if self.lambda_v == 0.0 && self.lambda_s == 0.0 {
            return Err(Error::Config("loss weights must not both be zero".into()));
        }
        Ok(())
    }
}

/// A frozen classifier whose penultimate activations define the semantic
/// feature space.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<F: Scalar> {
    backbone: Classifier<F>,
    frozen: bool,
}

impl<F: Scalar> FeatureExtractor<F> {
    pub fn new(backbone: Classifier<F>) -> Self {
        Self { backbone, frozen: true }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the extractor trainable. Loss functions refuse to use it in this
    /// state; this exists so the guard itself is testable.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn output_dim(&self) -> usize {
        self.backbone.feat_dim
    }

    pub fn features(&mut self, x: &Array4<F>) -> Array2<F> {
        self.backbone.features(x)
    }

    /// Gradient of the most recent `features` call with respect to its input.
    /// Parameter values are untouched (only scratch gradient buffers change).
    pub fn features_backward(&mut self, grad_feat: &Array2<F>) -> Array4<F> {
        let g = self.backbone.backward_from_features(grad_feat);
        self.backbone.zero_grads();
        g
    }

    /// Flat snapshot of parameter values, for freeze-invariant checks.
    pub fn param_snapshot(&self) -> Vec<F> {
        crate::nn::flatten_values(&self.backbone.params())
    }

    pub fn backbone(&self) -> &Classifier<F> {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Classifier<F> {
        &mut self.backbone
    }
}

/// The osmosis generator: two encoders, one decoder with skip connections
/// from the original-image encoder.
#[derive(Debug, Clone)]
pub struct Transporter<F: Scalar> {
    pub unet: Unet<F>,
    pub resolution: usize,
}

/// Build a transporter for square inputs of the given resolution.
pub fn build_transporter<F: Scalar>(
    resolution: usize,
    cfg: UnetConfig,
    seed: u64,
) -> Result<Transporter<F>> {
    let mut rng = rng_for(seed, "transporter-init");
    let unet = Unet::new(resolution, cfg, &mut rng)?;
    log::info!("transporter parameters: {}", unet.param_count());
    Ok(Transporter { unet, resolution })
}

impl<F: Scalar> Transporter<F> {
    pub fn param_count(&self) -> usize {
        self.unet.param_count()
    }

    fn check_input(&self, x: &Array3<F>, which: &str) -> Result<()> {
        let want = (3, self.resolution, self.resolution);
        if x.dim() != want {
            return Err(Error::ShapeMismatch {
                context: format!("transport input {which}"),
                expected: format!("{want:?}"),
                got: format!("{:?}", x.dim()),
            });
        }
        Ok(())
    }

    /// Generate one osmosis image x_c from an (original, hijack) pair.
    pub fn transport(&mut self, x_o: &Array3<F>, x_h: &Array3<F>) -> Result<Array3<F>> {
        self.check_input(x_o, "x_o")?;
        self.check_input(x_h, "x_h")?;
        let xo4 = x_o.clone().insert_axis(Axis(0));
        let xh4 = x_h.clone().insert_axis(Axis(0));
        Ok(self.unet.forward(&xo4, &xh4).index_axis(Axis(0), 0).to_owned())
    }

    pub fn transport_batch(&mut self, x_o: &Array4<F>, x_h: &Array4<F>) -> Array4<F> {
        self.unet.forward(x_o, x_h)
    }

    /// Persist to the tensor-directory checkpoint format.
    pub fn save(&self, dir: &std::path::Path, weights: &LossWeights, seed: u64) -> Result<()> {
        let config = serde_json::json!({
            "kind": "transporter",
            "resolution": self.resolution,
            "depth": self.unet.cfg.depth,
            "base_width": self.unet.cfg.base_width,
            "loss_weights": weights,
            "seed": seed,
        });
        artifacts::save_checkpoint(dir, &config, &self.unet.named_params())
    }

    pub fn load(dir: &std::path::Path) -> Result<(Transporter<F>, LossWeights, u64)> {
        let config = artifacts::load_config(dir)?;
        let get = |k: &str| {
            config
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Artifact(format!("checkpoint config missing '{k}'")))
        };
        let resolution = get("resolution")? as usize;
        let cfg = UnetConfig { depth: get("depth")? as usize, base_width: get("base_width")? as usize };
        let weights: LossWeights = serde_json::from_value(
            config
                .get("loss_weights")
                .cloned()
                .ok_or_else(|| Error::Artifact("checkpoint config missing 'loss_weights'".into()))?,
        )?;
        let seed = get("seed")?;
        let mut t = build_transporter::<F>(resolution, cfg, seed)?;
        artifacts::load_params(dir, &mut t.unet.named_params_mut())?;
        Ok((t, weights, seed))
    }
}

/// One generated osmosis sample with its pair of task labels.
#[derive(Debug, Clone)]
pub struct OsmosisSample<F: Scalar> {
    pub x_c: Array3<F>,
    pub y_o: usize,
    pub y_h: usize,
    pub source_ids: (usize, usize),
}

fn check_same_shape<F: Scalar>(a: &Array3<F>, b: &Array3<F>, context: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Mean absolute pixel difference between x_c and x_o.
pub fn visual_loss<F: Scalar>(x_c: &Array3<F>, x_o: &Array3<F>) -> Result<f64> {
    check_same_shape(x_c, x_o, "visual_loss")?;
    let n = x_c.len() as f64;
    let sum: f64 = x_c
        .iter()
        .zip(x_o.iter())
        .map(|(&a, &b)| (a.to_f64_() - b.to_f64_()).abs())
        .sum();
    Ok(sum / n)
}

/// Mean absolute difference between extractor features of x_c and x_h.
pub fn semantic_loss<F: Scalar>(
    extractor: &mut FeatureExtractor<F>,
    x_c: &Array3<F>,
    x_h: &Array3<F>,
) -> Result<f64> {
    if !extractor.is_frozen() {
        return Err(Error::ExtractorNotFrozen);
    }
    check_same_shape(x_c, x_h, "semantic_loss")?;
    let f_c = extractor.features(&x_c.clone().insert_axis(Axis(0)));
    let f_h = extractor.features(&x_h.clone().insert_axis(Axis(0)));
    let n = f_c.len() as f64;
    let sum: f64 = f_c
        .iter()
        .zip(f_h.iter())
        .map(|(&a, &b)| (a.to_f64_() - b.to_f64_()).abs())
        .sum();
    Ok(sum / n)
}

/// lambda_v * visual + lambda_s * semantic.
pub fn total_loss<F: Scalar>(
    weights: &LossWeights,
    x_c: &Array3<F>,
    x_o: &Array3<F>,
    x_h: &Array3<F>,
    extractor: &mut FeatureExtractor<F>,
) -> Result<f64> {
    weights.validate()?;
    Ok(weights.lambda_v * visual_loss(x_c, x_o)? + weights.lambda_s * semantic_loss(extractor, x_c, x_h)?)
}

/// Gradient of `total_loss` with respect to x_c (batch form). Used by the
/// training loop and by the finite-difference sanity test.
pub fn total_loss_grad<F: Scalar>(
    weights: &LossWeights,
    x_c: &Array4<F>,
    x_o: &Array4<F>,
    x_h: &Array4<F>,
    extractor: &mut FeatureExtractor<F>,
) -> Result<(f64, Array4<F>)> {
    weights.validate()?;
    if !extractor.is_frozen() {
        return Err(Error::ExtractorNotFrozen);
    }
    let n_pix = x_c.len() as f64;
    let lv = F::from_f64_(weights.lambda_v / n_pix);
    let mut grad = Array4::<F>::zeros(x_c.raw_dim());
    let mut vis_sum = 0.0;
    for ((g, &a), &b) in grad.iter_mut().zip(x_c.iter()).zip(x_o.iter()) {
        let d = a.to_f64_() - b.to_f64_();
        vis_sum += d.abs();
        *g = lv * F::from_f64_(d.signum());
    }
    let f_h = extractor.features(x_h);
    let f_c = extractor.features(x_c); // last forward: backward maps to x_c
    let n_feat = f_c.len() as f64;
    let ls = F::from_f64_(weights.lambda_s / n_feat);
    let mut gf = Array2::<F>::zeros(f_c.raw_dim());
    let mut sem_sum = 0.0;
    for ((g, &a), &b) in gf.iter_mut().zip(f_c.iter()).zip(f_h.iter()) {
        let d = a.to_f64_() - b.to_f64_();
        sem_sum += d.abs();
        *g = ls * F::from_f64_(d.signum());
    }
    grad += &extractor.features_backward(&gf);
    let loss = weights.lambda_v * vis_sum / n_pix + weights.lambda_s * sem_sum / n_feat;
    Ok((loss, grad))
}

/// Output of a transporter training run.
pub struct TrainOutcome<F: Scalar> {
    pub model: Transporter<F>,
    pub osmosis: Vec<OsmosisSample<F>>,
    pub epoch_losses: Vec<f64>,
}

/// Train a transporter on paired original/hijack samples and produce the
/// osmosis set from a final full pass.
pub fn train_transporter<F: Scalar>(
    d_o: &LoadedDataset<F>,
    d_h: &LoadedDataset<F>,
    mapping: &LabelMapping,
    extractor: &mut FeatureExtractor<F>,
    weights: &LossWeights,
    unet_cfg: UnetConfig,
    cfg: &TrainCfg,
    seed: u64,
) -> Result<TrainOutcome<F>> {
    weights.validate()?;
    if !extractor.is_frozen() {
        return Err(Error::ExtractorNotFrozen);
    }
    let resolution = d_o.spec.resolution.0;
    let mut model = build_transporter::<F>(resolution, unet_cfg, seed)?;
    let mut adam = Adam::new(F::from_f64_(cfg.learning_rate));
    let mut sgd = Sgd::new(F::from_f64_(cfg.learning_rate));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let stream = pair_samples(d_o, d_h, mapping, seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9))?;
        let mut pending: Vec<crate::datasets::SamplePair<F>> = Vec::new();
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        let flush = |pending: &mut Vec<crate::datasets::SamplePair<F>>,
                         model: &mut Transporter<F>,
                         adam: &mut Adam<F>,
                         sgd: &mut Sgd<F>,
                         extractor: &mut FeatureExtractor<F>|
         -> Result<f64> {
            let nb = pending.len();
            let mut xo = Array4::<F>::zeros((nb, 3, resolution, resolution));
            let mut xh = Array4::<F>::zeros((nb, 3, resolution, resolution));
            for (i, p) in pending.iter().enumerate() {
                xo.index_axis_mut(Axis(0), i).assign(&p.x_o);
                xh.index_axis_mut(Axis(0), i).assign(&p.x_h);
            }
            pending.clear();
            let xc = model.unet.forward(&xo, &xh);
            let (loss, grad) = total_loss_grad(weights, &xc, &xo, &xh, extractor)?;
            model.unet.zero_grads();
            model.unet.backward(&grad);
            let mut params = model.unet.params_mut();
            match cfg.optimizer {
                OptimizerKind::Adam => adam.step(&mut params),
                OptimizerKind::Sgd => sgd.step(&mut params),
            }
            Ok(loss)
        };
        for pair in stream {
            pending.push(pair);
            if pending.len() == cfg.batch_size {
                epoch_sum += flush(&mut pending, &mut model, &mut adam, &mut sgd, extractor)?;
                batches += 1;
            }
        }
        if !pending.is_empty() {
            epoch_sum += flush(&mut pending, &mut model, &mut adam, &mut sgd, extractor)?;
            batches += 1;
        }
        let mean = epoch_sum / batches.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { context: "transporter epoch", index: epoch });
        }
        log::info!("transporter epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    // final full pass induces the osmosis set
    let osmosis = generate_osmosis_set(&mut model, d_o, d_h, mapping, seed)?;
    Ok(TrainOutcome { model, osmosis, epoch_losses })
}

/// One full paired pass through the data in evaluation mode.
pub fn generate_osmosis_set<F: Scalar>(
    model: &mut Transporter<F>,
    d_o: &LoadedDataset<F>,
    d_h: &LoadedDataset<F>,
    mapping: &LabelMapping,
    seed: u64,
) -> Result<Vec<OsmosisSample<F>>> {
    let pairs: Vec<_> = pair_samples(d_o, d_h, mapping, seed ^ 0x05f5_e0ff)?.collect();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let nb = chunk.len();
        let res = model.resolution;
        let mut xo = Array4::<F>::zeros((nb, 3, res, res));
        let mut xh = Array4::<F>::zeros((nb, 3, res, res));
        for (i, p) in chunk.iter().enumerate() {
            xo.index_axis_mut(Axis(0), i).assign(&p.x_o);
            xh.index_axis_mut(Axis(0), i).assign(&p.x_h);
        }
        let xc = model.transport_batch(&xo, &xh);
        for (i, p) in chunk.iter().enumerate() {
            out.push(OsmosisSample {
                x_c: xc.index_axis(Axis(0), i).to_owned(),
                y_o: p.y_o,
                y_h: p.y_h,
                source_ids: p.source_ids,
            });
        }
    }
    Ok(out)
}
