//! Clean-distilled control: the full distillation and fine-tuning recipe
//! applied to the real original images with no osmosis blending. This is the
//! baseline both stealth claims lean on: the attack's utility is judged
//! against it, and its own ASR shows what the query protocol yields when no
//! hijack signal was ever embedded.

use super::config::ExperimentConfig;
use crate::datasets::{class_mean_images, load_dataset, LabelMapping, LoadedDataset, Split};
use crate::distiller::{
    distill, mosaic_augment, osmosis_arrays, record_expert_trajectory, Observer, Surrogate,
};
use crate::error::{Error, Result};
use crate::hijack::{
    run_hijack_experiment, training_arrays, EvalReport, HijackEvalContext,
};
use crate::models::{build_classifier, fit};
use crate::nn::one_hot;
use crate::rng_for;
use crate::scalar::Scalar;
use crate::transporter::{OsmosisSample, Transporter};
use ndarray::{s, Array4, Axis};

/// Train the mosaic-labeling observer on real images, the osmosis images
/// under their original-task label, and mosaic-augmented variants of both.
pub(super) fn train_observer<F: Scalar>(
    cfg: &ExperimentConfig,
    orig_train: &LoadedDataset<F>,
    osmosis: &[OsmosisSample<F>],
    seed: u64,
) -> Result<Observer<F>> {
    let k_o = cfg.original.num_classes;
    let resolution = cfg.original.resolution.0;
    let mut backbone = build_classifier(
        cfg.distill.surrogate_arch,
        k_o,
        resolution,
        &mut rng_for(seed, "observer-init"),
    )?;
    let (xc_images, _) = osmosis_arrays(osmosis, k_o)?;
    let xc_labels: Vec<usize> = osmosis.iter().map(|s| s.y_o).collect();
    let per_class = orig_train.len() / k_o.max(1);
    let (aug_real, aug_real_labels) = mosaic_augment(
        &orig_train.images,
        &orig_train.labels,
        cfg.distill.params.grid,
        cfg.distill.params.key_patches,
        per_class,
        seed,
    )?;
    let (aug_xc, aug_xc_labels) = mosaic_augment(
        &xc_images,
        &xc_labels,
        cfg.distill.params.grid,
        cfg.distill.params.key_patches,
        per_class,
        seed ^ 0xa5a5,
    )?;
    let parts: [(&Array4<F>, &[usize]); 4] = [
        (&orig_train.images, &orig_train.labels),
        (&xc_images, &xc_labels),
        (&aug_real, &aug_real_labels),
        (&aug_xc, &aug_xc_labels),
    ];
    let total: usize = parts.iter().map(|(im, _)| im.dim().0).sum();
    let mut obs_images = Array4::zeros((total, 3, resolution, resolution));
    let mut obs_labels = Vec::with_capacity(total);
    let mut at_row = 0usize;
    for (im, labels) in parts {
        let n = im.dim().0;
        obs_images.slice_mut(s![at_row..at_row + n, .., .., ..]).assign(im);
        obs_labels.extend_from_slice(labels);
        at_row += n;
    }
    let targets = one_hot(&obs_labels, k_o);
    fit(
        &mut backbone,
        &obs_images,
        &targets,
        &cfg.distill.observer_train,
        &mut rng_for(seed, "observer-train"),
        |_, _| {},
    )?;
    Ok(Observer::new(backbone))
}

/// Run the control experiment: distill the real original images with the
/// exact configuration of the attack run, fine-tune a fresh victim on the
/// result, and evaluate it with the same query protocol. The transporter is
/// only consulted to form the hijack queries.
pub fn clean_control<F: Scalar>(
    cfg: &ExperimentConfig,
    transporter: &mut Transporter<F>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let seed = cfg.seed;
    let orig_train: LoadedDataset<F> = load_dataset(&cfg.original, Split::Train)?;
    let orig_test: LoadedDataset<F> = load_dataset(&cfg.original, Split::Test)?;
    let hij_test: LoadedDataset<F> = load_dataset(&cfg.hijacking, Split::Test)?;
    let mapping = LabelMapping::new(
        cfg.original.num_classes,
        cfg.hijacking.num_classes,
        cfg.mapping.strategy,
        cfg.mapping.seed,
    )?;
    let k_o = cfg.original.num_classes;

    // stand-in osmosis set: the real images themselves
    let clean: Vec<OsmosisSample<F>> = (0..orig_train.len())
        .map(|i| {
            let y_o = orig_train.labels[i];
            let y_h = mapping
                .map(y_o)
                .ok_or_else(|| Error::Config(format!("class {y_o} outside the mapping")))?;
            Ok(OsmosisSample {
                x_c: orig_train.images.index_axis(Axis(0), i).to_owned(),
                y_o,
                y_h,
                source_ids: (i, i),
            })
        })
        .collect::<Result<_>>()?;

    let (images, targets) = osmosis_arrays(&clean, k_o)?;
    let mut surrogate = Surrogate::prepare(
        &images,
        &targets,
        cfg.distill.surrogate_arch,
        &cfg.distill.surrogate_warmup,
        seed,
    )?;
    let mut buffer = Vec::with_capacity(cfg.distill.trajectories.count);
    for k in 0..cfg.distill.trajectories.count.max(1) {
        buffer.push(record_expert_trajectory(
            &clean,
            &mut surrogate,
            &cfg.distill.trajectories.train,
            cfg.distill.trajectories.snapshot_interval,
            seed.wrapping_add(k as u64),
        )?);
    }
    let mut observer = train_observer(cfg, &orig_train, &clean, seed)?;
    let out = distill(
        &clean,
        &buffer,
        &mut surrogate,
        &mut observer,
        &mapping,
        &cfg.distill.params,
        seed,
    )?;

    let diluted = out.dod.dilute(&orig_train, cfg.dilution_ratio, seed)?;
    let (train_images, train_targets) = training_arrays(&diluted)?;
    let carriers = class_mean_images(&orig_train);
    let mut ctx = HijackEvalContext {
        transporter,
        mapping: &mapping,
        original_test: &orig_test,
        hijack_test: &hij_test,
        carriers: &carriers,
        query_mode: cfg.victim.query_mode,
    };
    let (_, report) = run_hijack_experiment(
        &train_images,
        &train_targets,
        cfg.victim.arch,
        &cfg.victim.finetune,
        &mut ctx,
        "clean-control",
        seed,
    )?;
    Ok(report)
}
