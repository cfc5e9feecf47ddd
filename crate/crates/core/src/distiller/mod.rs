//! Compression of an osmosis set into a small synthetic training set:
//! realism-scored key patches, mosaic assembly, soft relabeling, and
//! trajectory-matching optimization of the mosaic pixels.

pub mod matching;
pub mod patches;
pub mod trajectory;

pub use matching::{matching_loss_and_grads, MatchingGrads};
pub use patches::{
    assemble_mosaic, crop_patches, mosaic_augment, realism_score, reassemble_grid,
    select_key_patches, soft_relabel, Observer, Patch, ScoreLabel,
};
pub use trajectory::{
    record_head_trajectory, trajectory_loss, trajectory_loss_grad, ExpertTrajectory, Head,
};

use crate::datasets::{dilute, DilutedSample, LabelMapping, LoadedDataset};
use crate::error::{Error, Result};
use crate::models::{build_classifier, fit, ArchId, Classifier, TrainCfg};
use crate::nn::{one_hot, Adam, Param};
use crate::rng_for;
use crate::scalar::Scalar;
use crate::transporter::OsmosisSample;
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Surrogate model for expert trajectories: a classifier whose backbone is
/// frozen after warmup, with head training tracked separately.
#[derive(Debug, Clone)]
pub struct Surrogate<F: Scalar> {
    pub classifier: Classifier<F>,
    pub arch: ArchId,
}

impl<F: Scalar> Surrogate<F> {
    /// Build and warm up the backbone on the osmosis set, then treat it as
    /// frozen (only `features` and its input gradient are used afterwards).
    pub fn prepare(
        images: &Array4<F>,
        targets: &Array2<F>,
        arch: ArchId,
        warmup: &TrainCfg,
        seed: u64,
    ) -> Result<Self> {
        let res = images.dim().2;
        let classes = targets.dim().1;
        let mut classifier =
            build_classifier(arch, classes, res, &mut rng_for(seed, "surrogate-init"))?;
        fit(
            &mut classifier,
            images,
            targets,
            warmup,
            &mut rng_for(seed, "surrogate-warmup"),
            |_, _| {},
        )?;
        Ok(Self { classifier, arch })
    }

    pub fn feat_dim(&self) -> usize {
        self.classifier.feat_dim
    }

    pub fn features(&mut self, images: &Array4<F>) -> Array2<F> {
        self.classifier.features(images)
    }

    /// Gradient of the last `features` call with respect to its input.
    pub fn features_backward(&mut self, grad: &Array2<F>) -> Array4<F> {
        let g = self.classifier.backward_from_features(grad);
        self.classifier.zero_grads();
        g
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let config = serde_json::json!({
            "kind": "surrogate",
            "arch": self.arch.as_str(),
            "classes": self.classifier.num_classes,
            "resolution": self.classifier.resolution,
        });
        crate::artifacts::save_checkpoint(dir, &config, &self.classifier.named_params())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = crate::artifacts::load_config(dir)?;
        let arch: ArchId = config
            .get("arch")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Artifact("surrogate config missing 'arch'".into()))?
            .parse()
            .map_err(|_| Error::Artifact("unknown surrogate arch".into()))?;
        let classes = config.get("classes").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let resolution = config.get("resolution").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let mut classifier =
            build_classifier(arch, classes, resolution, &mut rng_for(0, "surrogate-load"))?;
        crate::artifacts::load_params(dir, &mut classifier.named_params_mut())?;
        Ok(Self { classifier, arch })
    }
}

/// Stack osmosis images into a batch plus hard original-task targets.
pub fn osmosis_arrays<F: Scalar>(
    osmosis: &[OsmosisSample<F>],
    num_classes: usize,
) -> Result<(Array4<F>, Array2<F>)> {
    if osmosis.is_empty() {
        return Err(Error::Dataset("empty osmosis set".into()));
    }
    let (c, h, w) = osmosis[0].x_c.dim();
    let mut images = Array4::zeros((osmosis.len(), c, h, w));
    let labels: Vec<usize> = osmosis.iter().map(|s| s.y_o).collect();
    for (i, s) in osmosis.iter().enumerate() {
        images.index_axis_mut(Axis(0), i).assign(&s.x_c);
    }
    Ok((images, one_hot(&labels, num_classes)))
}

/// Record one expert trajectory: head-only SGD over frozen surrogate features
/// of the osmosis set, snapshotted every `snapshot_interval` steps.
pub fn record_expert_trajectory<F: Scalar>(
    osmosis: &[OsmosisSample<F>],
    surrogate: &mut Surrogate<F>,
    cfg: &TrainCfg,
    snapshot_interval: usize,
    seed: u64,
) -> Result<ExpertTrajectory<F>> {
    if snapshot_interval == 0 {
        return Err(Error::Config("snapshot interval must be positive".into()));
    }
    let classes = surrogate.classifier.num_classes;
    let (images, targets) = osmosis_arrays(osmosis, classes)?;
    let z = surrogate.features(&images);
    let batches_per_epoch = images.dim().0.div_ceil(cfg.batch_size);
    let steps = cfg.epochs * batches_per_epoch;
    let mut rng = rng_for(seed, "expert-trajectory");
    record_head_trajectory(
        &z,
        &targets,
        surrogate.arch,
        steps,
        snapshot_interval,
        cfg.learning_rate,
        cfg.batch_size,
        seed,
        &mut rng,
    )
}

/// Distillation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Synthetic images per original class.
    pub ipc: usize,
    /// Key patches per mosaic (N); must be a perfect square.
    pub key_patches: usize,
    /// Crop grid applied to each osmosis image.
    pub grid: (usize, usize),
    /// Outer optimization epochs.
    pub epochs: usize,
    /// Expert segment length g, in snapshot intervals.
    pub expert_span: usize,
    /// Adam learning rate on mosaic pixels.
    pub pixel_lr: f64,
    /// Learning rate on the synthetic learning rate.
    pub lr_lr: f64,
    /// Initial synthetic (student) learning rate.
    pub syn_lr_init: f64,
    /// Label used in the second realism-score term.
    pub score_label: ScoreLabel,
    /// Jointly optimize soft labels during matching instead of re-deriving
    /// them from the observer afterwards.
    pub joint_soft_labels: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            ipc: 50,
            key_patches: 4,
            grid: (2, 2),
            epochs: 300,
            expert_span: 2,
            pixel_lr: 0.01,
            lr_lr: 1e-4,
            syn_lr_init: 0.05,
            score_label: ScoreLabel::Original,
            joint_soft_labels: false,
        }
    }
}

/// The distilled synthetic training set published to the victim pipeline.
#[derive(Debug, Clone)]
pub struct DistilledOsmosisSet<F: Scalar> {
    /// (ipc * classes, 3, res, res), values in [0,1].
    pub images: Array4<F>,
    /// (ipc * classes, classes), rows sum to 1.
    pub soft_labels: Array2<F>,
    /// Original-task class of each synthetic image.
    pub class_ids: Vec<usize>,
    pub ipc: usize,
    pub num_classes: usize,
    pub resolution: usize,
    pub mapping: LabelMapping,
    /// Per image: the (parent osmosis id, grid position) of each patch.
    pub provenance: Vec<Vec<(usize, (usize, usize))>>,
}

impl<F: Scalar> DistilledOsmosisSet<F> {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Mix with real samples; a `ratio` fraction of the result is real.
    pub fn dilute(
        &self,
        real: &LoadedDataset<F>,
        ratio: f64,
        seed: u64,
    ) -> Result<Vec<DilutedSample<F>>> {
        dilute(&self.images, &self.soft_labels, real, ratio, seed)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = DodManifest {
            ipc: self.ipc,
            classes: self.num_classes,
            resolution: self.resolution,
            count: self.len(),
            class_ids: self.class_ids.clone(),
            mapping: self.mapping.clone(),
            provenance: self.provenance.clone(),
        };
        fs::write(dir.join("dod.json"), serde_json::to_vec_pretty(&manifest)?)?;
        let write_f32 = |name: &str, values: &mut dyn Iterator<Item = F>| -> Result<()> {
            let mut bytes = Vec::new();
            for v in values {
                bytes.extend_from_slice(&v.to_f32_().to_le_bytes());
            }
            fs::write(dir.join(name), bytes)?;
            Ok(())
        };
        write_f32("images.f32", &mut self.images.iter().copied())?;
        write_f32("soft_labels.f32", &mut self.soft_labels.iter().copied())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("dod.json");
        if !manifest_path.is_file() {
            return Err(Error::MissingArtifact(manifest_path.display().to_string()));
        }
        let m: DodManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        let read_f32 = |name: &str, want: usize| -> Result<Vec<F>> {
            let bytes = fs::read(dir.join(name))?;
            if bytes.len() != want * 4 {
                return Err(Error::Artifact(format!(
                    "{name}: {} bytes, expected {}",
                    bytes.len(),
                    want * 4
                )));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| F::from_f32_(f32::from_le_bytes(c.try_into().unwrap())))
                .collect())
        };
        let n = m.count;
        let images = Array4::from_shape_vec(
            (n, 3, m.resolution, m.resolution),
            read_f32("images.f32", n * 3 * m.resolution * m.resolution)?,
        )
        .map_err(|e| Error::Artifact(e.to_string()))?;
        let soft_labels =
            Array2::from_shape_vec((n, m.classes), read_f32("soft_labels.f32", n * m.classes)?)
                .map_err(|e| Error::Artifact(e.to_string()))?;
        Ok(Self {
            images,
            soft_labels,
            class_ids: m.class_ids,
            ipc: m.ipc,
            num_classes: m.classes,
            resolution: m.resolution,
            mapping: m.mapping,
            provenance: m.provenance,
        })
    }

    fn check_invariants(&self) -> Result<()> {
        for c in 0..self.num_classes {
            let count = self.class_ids.iter().filter(|&&y| y == c).count();
            if count != self.ipc {
                return Err(Error::Config(format!(
                    "class {c} has {count} synthetic images, expected {}",
                    self.ipc
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DodManifest {
    ipc: usize,
    classes: usize,
    resolution: usize,
    count: usize,
    class_ids: Vec<usize>,
    mapping: LabelMapping,
    provenance: Vec<Vec<(usize, (usize, usize))>>,
}

/// Build the patch-initialized mosaics for every class.
pub fn init_mosaics<F: Scalar>(
    osmosis: &[OsmosisSample<F>],
    observer: &mut Observer<F>,
    mapping: &LabelMapping,
    cfg: &DistillConfig,
) -> Result<DistilledOsmosisSet<F>> {
    if osmosis.is_empty() {
        return Err(Error::Dataset("empty osmosis set".into()));
    }
    let classes = observer.num_classes();
    let resolution = osmosis[0].x_c.dim().1;
    let n_total = cfg.ipc * classes;
    let mut images = Array4::zeros((n_total, 3, resolution, resolution));
    let mut soft_labels = Array2::zeros((n_total, classes));
    let mut class_ids = Vec::with_capacity(n_total);
    let mut provenance = Vec::with_capacity(n_total);
    let mut row = 0usize;
    for class in 0..classes {
        let mut pool: Vec<Patch<F>> = Vec::new();
        for (id, s) in osmosis.iter().enumerate() {
            if s.y_o != class {
                continue;
            }
            let score_y = match cfg.score_label {
                ScoreLabel::Original => s.y_o,
                ScoreLabel::Hijack => s.y_h.min(classes - 1),
            };
            for mut p in crop_patches(&s.x_c, id, cfg.grid)? {
                p.score = realism_score(observer, s.y_o, &p.pixels, score_y)?;
                pool.push(p);
            }
        }
        let picked = select_key_patches(pool, class, cfg.ipc * cfg.key_patches)?;
        for chunk in picked.chunks(cfg.key_patches) {
            let (pixels, prov) = assemble_mosaic(chunk, resolution)?;
            let soft = soft_relabel(observer, &pixels)?;
            images.index_axis_mut(Axis(0), row).assign(&pixels);
            soft_labels.row_mut(row).assign(&soft);
            class_ids.push(class);
            provenance.push(prov);
            row += 1;
        }
    }
    let dod = DistilledOsmosisSet {
        images,
        soft_labels,
        class_ids,
        ipc: cfg.ipc,
        num_classes: classes,
        resolution,
        mapping: mapping.clone(),
        provenance,
    };
    dod.check_invariants()?;
    Ok(dod)
}

/// Global L2 norm cap on the pixel gradient per distillation epoch.
const GRAD_CLIP: f64 = 5.0;

/// Result of a distillation run.
pub struct DistillOutcome<F: Scalar> {
    pub dod: DistilledOsmosisSet<F>,
    pub epoch_losses: Vec<f64>,
    pub final_syn_lr: f64,
}

/// Optimize the patch-initialized mosaics by matching expert trajectories.
pub fn distill<F: Scalar>(
    osmosis: &[OsmosisSample<F>],
    buffer: &[ExpertTrajectory<F>],
    surrogate: &mut Surrogate<F>,
    observer: &mut Observer<F>,
    mapping: &LabelMapping,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<DistillOutcome<F>> {
    if buffer.is_empty() {
        return Err(Error::Config("empty trajectory buffer".into()));
    }
    for t in buffer {
        t.validate_for_matching()?;
        if t.snapshots.len() <= cfg.expert_span {
            return Err(Error::Config(format!(
                "trajectory with {} snapshots cannot host a span of {}",
                t.snapshots.len(),
                cfg.expert_span
            )));
        }
    }
    let mut dod = init_mosaics(osmosis, observer, mapping, cfg)?;
    let mut rng = rng_for(seed, "distill");
    let mut pixels = Param::new(dod.images.clone().into_dyn());
    let mut adam = Adam::new(F::from_f64_(cfg.pixel_lr));
    let mut syn_lr = cfg.syn_lr_init;
    let mut targets = dod.soft_labels.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    // The trajectory loss is normalized by the expert's movement over the
    // segment. Segments where the expert has all but converged make that
    // denominator vanish and the loss and its gradients explode, so only
    // segments with meaningful movement are eligible for matching.
    let mut segments: Vec<(usize, usize, f64)> = Vec::new();
    for (ti, t) in buffer.iter().enumerate() {
        for s in 0..t.snapshots.len() - cfg.expert_span {
            let moved: f64 = t.snapshots[s]
                .iter()
                .zip(&t.snapshots[s + cfg.expert_span])
                .map(|(&a, &b)| (a.to_f64_() - b.to_f64_()).powi(2))
                .sum();
            segments.push((ti, s, moved));
        }
    }
    let max_moved = segments.iter().fold(0.0f64, |m, s| m.max(s.2));
    let eligible: Vec<(usize, usize)> = segments
        .iter()
        .filter(|s| s.2 > 1e-3 * max_moved)
        .map(|s| (s.0, s.1))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Config("no expert segment shows parameter movement".into()));
    }
    for epoch in 0..cfg.epochs {
        let (ti, t) = eligible[rng.random_range(0..eligible.len())];
        let traj = &buffer[ti];
        let theta_start = &traj.snapshots[t];
        let theta_end = &traj.snapshots[t + cfg.expert_span];
        let steps = cfg.expert_span * traj.snapshot_interval;
        let images4 = pixels
            .value
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("pixel buffer is 4-d");
        let z = surrogate.features(&images4);
        let grads = matching_loss_and_grads(&z, &targets, syn_lr, theta_start, theta_end, steps)?;
        if !grads.loss.is_finite() {
            return Err(Error::NonFiniteLoss { context: "distill epoch", index: epoch });
        }
        let mut d_images = surrogate.features_backward(&grads.d_features);
        // clip the global gradient norm so one harsh segment cannot wreck
        // the pixel buffer in a single Adam step
        let gnorm = d_images.iter().map(|v| v.to_f64_().powi(2)).sum::<f64>().sqrt();
        if gnorm > GRAD_CLIP {
            let scale = F::from_f64_(GRAD_CLIP / gnorm);
            d_images.mapv_inplace(|v| v * scale);
        }
        pixels.grad.assign(&d_images.into_dyn());
        adam.step(&mut [&mut pixels]);
        pixels.value.mapv_inplace(|v| {
            let x = v.to_f64_().clamp(0.0, 1.0);
            F::from_f64_(x)
        });
        // bound the per-epoch learning-rate step to a fraction of its value
        let lr_step = (cfg.lr_lr * grads.d_lr).clamp(-0.1 * syn_lr, 0.1 * syn_lr);
        syn_lr = (syn_lr - lr_step).max(1e-4);
        if cfg.joint_soft_labels {
            let lr = F::from_f64_(cfg.pixel_lr);
            targets = &targets - &(&grads.d_targets * lr);
            for mut row in targets.rows_mut() {
                row.mapv_inplace(|v| F::from_f64_(v.to_f64_().max(1e-6)));
                let sum = row.iter().map(|v| v.to_f64_()).sum::<f64>();
                let inv = F::from_f64_(1.0 / sum);
                row.mapv_inplace(|v| v * inv);
            }
        }
        log::debug!("distill epoch {epoch}: loss {:.6}, syn_lr {syn_lr:.5}", grads.loss);
        epoch_losses.push(grads.loss);
    }
    dod.images = pixels
        .value
        .into_dimensionality::<ndarray::Ix4>()
        .expect("pixel buffer is 4-d");
    if cfg.joint_soft_labels {
        dod.soft_labels = targets;
    } else if cfg.epochs > 0 {
        // re-derive soft labels from the observer on the optimized pixels
        for i in 0..dod.len() {
            let img = dod.images.index_axis(Axis(0), i).to_owned();
            let soft = soft_relabel(observer, &img)?;
            dod.soft_labels.row_mut(i).assign(&soft);
        }
    }
    dod.check_invariants()?;
    Ok(DistillOutcome { dod, epoch_losses, final_syn_lr: syn_lr })
}

/// Per-class soft-label quality probe: fraction of images whose soft-label
/// argmax equals their class.
pub fn soft_label_agreement<F: Scalar>(soft_labels: &Array2<F>, class_ids: &[usize]) -> f64 {
    let mut hits = 0usize;
    for (row, &c) in soft_labels.rows().into_iter().zip(class_ids) {
        let arg = argmax(&row.to_owned());
        if arg == c {
            hits += 1;
        }
    }
    hits as f64 / class_ids.len().max(1) as f64
}

pub(crate) fn argmax<F: Scalar>(v: &Array1<F>) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests;
