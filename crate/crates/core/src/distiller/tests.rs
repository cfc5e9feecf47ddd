use super::*;
use crate::datasets::{load_dataset, DatasetRole, DatasetSpec, MappingStrategy, Split};
use crate::models::OptimizerKind;
use crate::transporter::OsmosisSample;
use ndarray::Array3;

const RES: usize = 16;

fn toy_world() -> (Vec<OsmosisSample<f64>>, LabelMapping, Observer<f64>) {
    let o = DatasetSpec::synth_digits("d-orig", DatasetRole::Original, &[0, 1], 32, 8, RES, 31);
    let h = DatasetSpec::synth_digits("d-hij", DatasetRole::Hijacking, &[2, 3], 32, 8, RES, 32);
    let d_o = load_dataset::<f64>(&o, Split::Train).unwrap();
    let d_h = load_dataset::<f64>(&h, Split::Train).unwrap();
    let mapping = LabelMapping::new(2, 2, MappingStrategy::Identity, 0).unwrap();
    // stand-in osmosis samples: visually the original image
    let pairs = crate::datasets::pair_samples(&d_o, &d_h, &mapping, 4).unwrap();
    let osmosis: Vec<OsmosisSample<f64>> = pairs
        .map(|p| OsmosisSample { x_c: p.x_o, y_o: p.y_o, y_h: p.y_h, source_ids: p.source_ids })
        .collect();
    // observer: classifier trained on the original task
    let mut obs_model =
        crate::models::build_classifier(crate::models::ArchId::ToyCnn, 2, RES, &mut crate::rng_for(1, "obs"))
            .unwrap();
    let cfg = TrainCfg { epochs: 30, batch_size: 16, learning_rate: 0.01, optimizer: OptimizerKind::Adam };
    crate::models::fit(
        &mut obs_model,
        &d_o.images,
        &one_hot(&d_o.labels, 2),
        &cfg,
        &mut crate::rng_for(2, "obs-fit"),
        |_, _| {},
    )
    .unwrap();
    (osmosis, mapping, Observer::new(obs_model))
}

fn toy_cfg() -> DistillConfig {
    DistillConfig {
        ipc: 2,
        key_patches: 4,
        grid: (2, 2),
        epochs: 0,
        expert_span: 2,
        pixel_lr: 0.02,
        lr_lr: 1e-3,
        syn_lr_init: 0.1,
        ..Default::default()
    }
}

fn toy_surrogate(osmosis: &[OsmosisSample<f64>]) -> Surrogate<f64> {
    let (images, targets) = osmosis_arrays(osmosis, 2).unwrap();
    let warmup = TrainCfg { epochs: 3, batch_size: 16, learning_rate: 0.01, optimizer: OptimizerKind::Adam };
    Surrogate::prepare(&images, &targets, crate::models::ArchId::ToyCnn, &warmup, 7).unwrap()
}

fn toy_buffer(osmosis: &[OsmosisSample<f64>], surrogate: &mut Surrogate<f64>) -> Vec<ExpertTrajectory<f64>> {
    let cfg = TrainCfg { epochs: 20, batch_size: 16, learning_rate: 0.1, optimizer: OptimizerKind::Sgd };
    (0..2)
        .map(|i| record_expert_trajectory(osmosis, surrogate, &cfg, 5, 100 + i).unwrap())
        .collect()
}

#[test]
fn observer_soft_labels_agree_with_classes_on_clean_images() {
    let (_, _, mut obs) = toy_world();
    let o = DatasetSpec::synth_digits("probe", DatasetRole::Original, &[0, 1], 40, 0, RES, 31);
    let probe = load_dataset::<f64>(&o, Split::Train).unwrap();
    let mut soft = Array2::zeros((probe.len(), 2));
    for i in 0..probe.len() {
        soft.row_mut(i).assign(&soft_relabel(&mut obs, &probe.image(i)).unwrap());
    }
    let agree = soft_label_agreement(&soft, &probe.labels);
    assert!(agree >= 0.95, "agreement {agree}");
}

#[test]
fn init_mosaics_satisfies_cardinality_and_ranges() {
    let (osmosis, mapping, mut obs) = toy_world();
    let cfg = toy_cfg();
    let dod = init_mosaics(&osmosis, &mut obs, &mapping, &cfg).unwrap();
    assert_eq!(dod.len(), cfg.ipc * 2);
    for c in 0..2 {
        assert_eq!(dod.class_ids.iter().filter(|&&y| y == c).count(), cfg.ipc);
    }
    assert!(dod.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    for row in dod.soft_labels.rows() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    for prov in &dod.provenance {
        assert_eq!(prov.len(), cfg.key_patches);
    }
}

#[test]
fn zero_epoch_distillation_returns_the_initial_mosaics() {
    let (osmosis, mapping, mut obs) = toy_world();
    let mut surrogate = toy_surrogate(&osmosis);
    let buffer = toy_buffer(&osmosis, &mut surrogate);
    let cfg = toy_cfg();
    let init = init_mosaics(&osmosis, &mut obs, &mapping, &cfg).unwrap();
    let out = distill(&osmosis, &buffer, &mut surrogate, &mut obs, &mapping, &cfg, 9).unwrap();
    assert!(out.epoch_losses.is_empty());
    assert_eq!(out.dod.images, init.images);
    assert_eq!(out.dod.soft_labels, init.soft_labels);
}

#[test]
fn toy_distillation_reduces_matching_loss() {
    let (osmosis, mapping, mut obs) = toy_world();
    let mut surrogate = toy_surrogate(&osmosis);
    let buffer = toy_buffer(&osmosis, &mut surrogate);
    let mut cfg = toy_cfg();
    cfg.epochs = 50;
    let out = distill(&osmosis, &buffer, &mut surrogate, &mut obs, &mapping, &cfg, 9).unwrap();
    let first: f64 = out.epoch_losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = out.epoch_losses[40..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "loss {first} -> {last}");
    assert!(out.dod.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    out.dod.check_invariants().unwrap();
    // 20-epoch moving average non-increasing over the final half
    let ma = |e: usize| -> f64 {
        let lo = e.saturating_sub(19);
        out.epoch_losses[lo..=e].iter().sum::<f64>() / (e - lo + 1) as f64
    };
    for e in 26..50 {
        assert!(ma(e) <= ma(e - 1) * 1.02, "moving average rose at epoch {e}");
    }
    assert!(out.final_syn_lr > 0.0);
}

#[test]
fn distillation_is_seed_deterministic() {
    let (osmosis, mapping, mut obs) = toy_world();
    let mut surrogate = toy_surrogate(&osmosis);
    let buffer = toy_buffer(&osmosis, &mut surrogate);
    let mut cfg = toy_cfg();
    cfg.epochs = 5;
    let a = distill(&osmosis, &buffer, &mut surrogate, &mut obs, &mapping, &cfg, 4).unwrap();
    let b = distill(&osmosis, &buffer, &mut surrogate, &mut obs, &mapping, &cfg, 4).unwrap();
    assert_eq!(a.dod.images, b.dod.images);
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn insufficient_patches_fail_with_the_class_named() {
    let (osmosis, mapping, mut obs) = toy_world();
    let mut cfg = toy_cfg();
    cfg.ipc = 1000;
    match init_mosaics(&osmosis, &mut obs, &mapping, &cfg) {
        Err(Error::InsufficientPatches { class: 0, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn expert_trajectory_snapshot_counting_through_the_public_op() {
    let (osmosis, _, _) = toy_world();
    let mut surrogate = toy_surrogate(&osmosis);
    // 32 samples, batch 16 -> 2 steps per epoch; 50 epochs -> 100 steps
    let cfg = TrainCfg { epochs: 50, batch_size: 16, learning_rate: 0.05, optimizer: OptimizerKind::Sgd };
    let t = record_expert_trajectory(&osmosis, &mut surrogate, &cfg, 10, 3).unwrap();
    assert_eq!(t.snapshots.len(), 11);

    let zero = TrainCfg { epochs: 0, ..cfg };
    let t0 = record_expert_trajectory(&osmosis, &mut surrogate, &zero, 10, 3).unwrap();
    assert_eq!(t0.snapshots.len(), 1);
}

#[test]
fn dod_round_trips_bit_exactly() {
    let (osmosis, mapping, mut obs) = toy_world();
    let cfg = toy_cfg();
    let dod64 = init_mosaics(&osmosis, &mut obs, &mapping, &cfg).unwrap();
    // f32 payloads round-trip exactly through the f32 file format
    let dod = DistilledOsmosisSet::<f32> {
        images: dod64.images.mapv(|v| v as f32),
        soft_labels: dod64.soft_labels.mapv(|v| v as f32),
        class_ids: dod64.class_ids.clone(),
        ipc: dod64.ipc,
        num_classes: dod64.num_classes,
        resolution: dod64.resolution,
        mapping: dod64.mapping.clone(),
        provenance: dod64.provenance.clone(),
    };
    let tmp = tempfile::tempdir().unwrap();
    dod.save(tmp.path()).unwrap();
    let back = DistilledOsmosisSet::<f32>::load(tmp.path()).unwrap();
    assert_eq!(back.images, dod.images);
    assert_eq!(back.soft_labels, dod.soft_labels);
    assert_eq!(back.class_ids, dod.class_ids);
    assert_eq!(back.mapping, dod.mapping);
    assert_eq!(back.provenance, dod.provenance);
}

#[test]
fn surrogate_checkpoint_round_trip_preserves_features() {
    let (osmosis, _, _) = toy_world();
    let mut surrogate = toy_surrogate(&osmosis);
    let tmp = tempfile::tempdir().unwrap();
    surrogate.save(tmp.path()).unwrap();
    let mut back = Surrogate::<f64>::load(tmp.path()).unwrap();
    let img: Array3<f64> = osmosis[0].x_c.clone();
    let batch = img.insert_axis(ndarray::Axis(0));
    let a = surrogate.features(&batch);
    let b = back.features(&batch);
    // parameters pass through f32 storage
    for (&x, &y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-5);
    }
}
