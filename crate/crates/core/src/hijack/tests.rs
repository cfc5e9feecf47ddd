use super::*;
use crate::datasets::{
    class_mean_images, load_dataset, DatasetRole, DatasetSpec, MappingStrategy, Provenance, Split,
};
use crate::models::{OptimizerKind, UnetConfig};
use crate::transporter::build_transporter;
use ndarray::Array1;

const RES: usize = 16;

fn ten_class_set(n: usize, seed: u64) -> LoadedDataset<f64> {
    let spec = DatasetSpec::synth_digits(
        "ten",
        DatasetRole::Original,
        &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
        n,
        0,
        RES,
        seed,
    );
    load_dataset(&spec, Split::Train).unwrap()
}

fn constant_victim(head_dim: usize, favored: usize) -> VictimModel<f64> {
    let mut v = VictimModel::new(ArchId::ToyCnn, head_dim, RES, 0).unwrap();
    // zero the head and bias toward one class: output is constant
    for (name, p) in v.classifier.named_params_mut() {
        if name.starts_with("head") {
            p.value.fill(0.0);
        }
    }
    let (_, bias) = v
        .classifier
        .named_params_mut()
        .into_iter()
        .find(|(n, _)| n == "head.bias")
        .expect("head bias present");
    bias.value[favored] = 10.0;
    v
}

#[test]
fn constant_predictor_scores_exactly_chance_on_a_balanced_set() {
    let test = ten_class_set(100, 3);
    let mut v = constant_victim(10, 0);
    let u = evaluate_utility(&mut v, &test).unwrap();
    assert!((u.fraction - 0.10).abs() < 1e-12);
}

#[test]
fn utility_matches_a_brute_force_counting_loop() {
    let test = ten_class_set(60, 5);
    let mut v = VictimModel::<f64>::new(ArchId::ToyCnn, 10, RES, 8).unwrap();
    let u = evaluate_utility(&mut v, &test).unwrap();
    let probs = v.probs(&test.images);
    let mut correct = 0usize;
    for (i, &y) in test.labels.iter().enumerate() {
        let row: Vec<f64> = probs.row(i).to_vec();
        let mut best = 0;
        for k in 1..10 {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    assert_eq!(u.hits, correct);
    assert!((u.fraction - correct as f64 / 60.0).abs() < 1e-12);
}

#[test]
fn empty_test_set_is_an_error() {
    let spec = DatasetSpec::synth_digits("e", DatasetRole::Original, &[0, 1], 4, 0, RES, 0);
    let empty: LoadedDataset<f64> = load_dataset(&spec, Split::Test).unwrap();
    let mut v = VictimModel::<f64>::new(ArchId::ToyCnn, 2, RES, 0).unwrap();
    assert!(evaluate_utility(&mut v, &empty).is_err());
}

#[test]
fn random_victim_asr_is_near_chance_in_raw_mode() {
    let hijack = ten_class_set(1000, 11);
    let mapping = LabelMapping::new(10, 10, MappingStrategy::Random, 2).unwrap();
    let mut v = VictimModel::<f64>::new(ArchId::ToyCnn, 10, RES, 31).unwrap();
    let mut t = build_transporter::<f64>(RES, UnetConfig { depth: 2, base_width: 4 }, 0).unwrap();
    let carriers = class_mean_images(&hijack);
    let asr = evaluate_asr(&mut v, &mut t, &mapping, &hijack, &carriers, QueryMode::Raw).unwrap();
    assert!(
        (asr.fraction - 0.10).abs() <= 0.05,
        "asr {} too far from chance",
        asr.fraction
    );
}

#[test]
fn per_class_asr_averages_to_the_overall_rate() {
    let hijack = ten_class_set(300, 13);
    let mapping = LabelMapping::new(10, 10, MappingStrategy::Identity, 0).unwrap();
    let mut v = VictimModel::<f64>::new(ArchId::ToyCnn, 10, RES, 17).unwrap();
    let mut t = build_transporter::<f64>(RES, UnetConfig { depth: 2, base_width: 4 }, 0).unwrap();
    let carriers = class_mean_images(&hijack);
    let asr = evaluate_asr(&mut v, &mut t, &mapping, &hijack, &carriers, QueryMode::Raw).unwrap();
    let weighted: f64 = asr.per_class.iter().map(|c| c.hits as f64).sum::<f64>() / asr.total as f64;
    assert!((weighted - asr.fraction).abs() < 1e-12);
    let recount: usize = asr.per_class.iter().map(|c| c.hits).sum();
    assert_eq!(recount, asr.hits);
}

#[test]
fn hijack_class_outside_the_mapping_is_rejected() {
    let hijack = ten_class_set(20, 19);
    // mapping covers only 4 original -> 4 hijack classes
    let mapping = LabelMapping::new(4, 4, MappingStrategy::Identity, 0).unwrap();
    let mut v = VictimModel::<f64>::new(ArchId::ToyCnn, 4, RES, 0).unwrap();
    let mut t = build_transporter::<f64>(RES, UnetConfig { depth: 2, base_width: 4 }, 0).unwrap();
    let carriers = class_mean_images(&hijack);
    let r = evaluate_asr(&mut v, &mut t, &mapping, &hijack, &carriers, QueryMode::Raw);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn zero_epoch_finetune_leaves_parameters_unchanged() {
    let mut v = VictimModel::<f64>::new(ArchId::ToyCnn, 2, RES, 5).unwrap();
    let before = crate::nn::flatten_values(&v.classifier.params());
    let train = ten_class_set(8, 23);
    let targets = crate::nn::one_hot(&train.labels.iter().map(|&y| y % 2).collect::<Vec<_>>(), 2);
    let cfg = TrainCfg { epochs: 0, ..Default::default() };
    finetune_victim(&mut v, &train.images, &targets, &cfg, 5).unwrap();
    assert_eq!(crate::nn::flatten_values(&v.classifier.params()), before);
}

#[test]
fn toy_finetune_reduces_training_loss() {
    let spec = DatasetSpec::synth_digits("ft", DatasetRole::Original, &[0, 1], 40, 0, RES, 41);
    let train: LoadedDataset<f64> = load_dataset(&spec, Split::Train).unwrap();
    let targets = crate::nn::one_hot(&train.labels, 2);
    let mut v = VictimModel::<f64>::new(ArchId::ToyCnn, 2, RES, 5).unwrap();
    let cfg = TrainCfg { epochs: 30, batch_size: 16, learning_rate: 0.01, optimizer: OptimizerKind::Adam };
    let losses = finetune_victim(&mut v, &train.images, &targets, &cfg, 5).unwrap();
    assert!(losses[29] < losses[0], "loss {} -> {}", losses[0], losses[29]);
}

#[test]
fn finetune_is_seed_deterministic() {
    let spec = DatasetSpec::synth_digits("det", DatasetRole::Original, &[0, 1], 16, 0, RES, 43);
    let train: LoadedDataset<f64> = load_dataset(&spec, Split::Train).unwrap();
    let targets = crate::nn::one_hot(&train.labels, 2);
    let cfg = TrainCfg { epochs: 3, batch_size: 8, learning_rate: 0.01, optimizer: OptimizerKind::Adam };
    let run = || {
        let mut v = VictimModel::<f64>::new(ArchId::ToyCnn, 2, RES, 5).unwrap();
        finetune_victim(&mut v, &train.images, &targets, &cfg, 9).unwrap();
        crate::nn::flatten_values(&v.classifier.params())
    };
    assert_eq!(run(), run());
}

#[test]
fn training_arrays_stack_diluted_samples() {
    let img = ndarray::Array3::<f64>::from_elem((3, 4, 4), 0.5);
    let samples = vec![
        DilutedSample {
            image: img.clone(),
            target: Array1::from_vec(vec![1.0, 0.0]),
            provenance: Provenance::Synthetic,
        },
        DilutedSample {
            image: img,
            target: Array1::from_vec(vec![0.0, 1.0]),
            provenance: Provenance::Real,
        },
    ];
    let (xs, ys) = training_arrays(&samples).unwrap();
    assert_eq!(xs.dim(), (2, 3, 4, 4));
    assert_eq!(ys[[1, 1]], 1.0);
    assert!(training_arrays::<f64>(&[]).is_err());
}

#[test]
fn report_serialization_is_stable() {
    let bd = EvalBreakdown {
        fraction: 0.5,
        hits: 1,
        total: 2,
        per_class: vec![ClassStat { class: 0, hits: 1, total: 2, fraction: 0.5 }],
    };
    let report = EvalReport {
        utility: 0.5,
        asr: 0.25,
        fingerprint: "abc".into(),
        utility_breakdown: bd.clone(),
        asr_breakdown: bd,
    };
    let a = report.to_json().unwrap();
    let b = report.to_json().unwrap();
    assert_eq!(a, b);
    let back: EvalReport = serde_json::from_str(&a).unwrap();
    assert_eq!(back, report);
    // keys appear in declaration order
    let u = a.find("\"utility\"").unwrap();
    let s = a.find("\"asr\"").unwrap();
    let f = a.find("\"fingerprint\"").unwrap();
    assert!(u < s && s < f);
}

#[test]
fn victim_checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let v = VictimModel::<f32>::new(ArchId::ToyCnn, 3, RES, 77).unwrap();
    v.save(tmp.path()).unwrap();
    let mut back = VictimModel::<f32>::load(tmp.path()).unwrap();
    let mut orig = v.clone();
    let test = ten_class_set(4, 51);
    let images = test.images.mapv(|x| x as f32);
    assert_eq!(orig.probs(&images), back.probs(&images));
    assert_eq!(back.arch, ArchId::ToyCnn);
    assert!(!back.pretrained);
}
