//! Acceptance gate for the toolkit: one pass/fail line per criterion.
//!
//! The criteria run sequentially inside a single test so they can share the
//! desk-scale pipeline artifacts (the stage cache lives under the target tmp
//! directory, so reruns are incremental).

use dodkit_core::datasets::{load_dataset, Split};
use dodkit_core::defense::{dpsgd_finetune, strip_report, PrivacyConfig, StripConfig};
use dodkit_core::distiller::{
    crop_patches, matching_loss_and_grads, realism_score, reassemble_grid, select_key_patches,
    trajectory_loss, DistilledOsmosisSet, Observer, Patch,
};
use dodkit_core::experiments::{
    load_artifact, run_pipeline, save_artifact, Artifact, ArtifactKind, ExperimentConfig,
    RunRecord, RunStatus, SweepAxis,
};
use dodkit_core::hijack::VictimModel;
use dodkit_core::models::{build_classifier, ArchId, TrainCfg};
use dodkit_core::transporter::{
    semantic_loss, total_loss, visual_loss, FeatureExtractor, LossWeights, Transporter,
};
use dodkit_core::{rng_for, Error};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use std::path::{Path, PathBuf};

type Check = Result<String, String>;

fn e<T>(r: dodkit_core::Result<T>) -> Result<T, String> {
    r.map_err(|err| err.to_string())
}

fn stage_path<'a>(record: &'a RunRecord, name: &str) -> Result<&'a Path, String> {
    record
        .stages
        .iter()
        .find(|s| s.name == name)
        .map(|s| s.path.as_path())
        .ok_or_else(|| format!("stage '{name}' missing from run record"))
}

fn completed(record: &RunRecord) -> Result<(), String> {
    match &record.status {
        RunStatus::Complete => Ok(()),
        RunStatus::Failed { stage, message } => Err(format!("stage {stage} failed: {message}")),
    }
}

/// Shared fixtures: the desk-scale pipeline run plus the clean-distilled
/// control, which applies the identical distillation and fine-tuning recipe
/// to the real original images (no osmosis blending).
struct Fixture {
    cfg: ExperimentConfig,
    root: PathBuf,
    base: RunRecord,
    clean_utility: f64,
    clean_asr: f64,
}

fn build_fixture() -> Result<Fixture, String> {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let cfg = ExperimentConfig::default();
    let base = e(run_pipeline::<f32>(&cfg, &root))?;
    completed(&base)?;

    let osmosis_dir = stage_path(&base, "osmosis")?.to_path_buf();
    let (mut transporter, _, _) = e(Transporter::<f32>::load(&osmosis_dir.join("transporter")))?;
    let clean = e(dodkit_core::experiments::clean_control(&cfg, &mut transporter))?;
    Ok(Fixture { cfg, root, base, clean_utility: clean.utility, clean_asr: clean.asr })
}

fn load_dod(record: &RunRecord) -> Result<DistilledOsmosisSet<f32>, String> {
    let dir = stage_path(record, "distill")?.join("dod");
    match e(load_artifact::<f32>(&dir, ArtifactKind::Dod))? {
        Artifact::Dod(d) => Ok(d),
        _ => Err("distill stage holds the wrong artifact kind".into()),
    }
}

// criterion 1: the distilled set hijacks the victim at desk scale while
// keeping original-task utility close to a clean control
fn end_to_end_attack(fx: &Fixture) -> Check {
    let report = fx.base.report.as_ref().ok_or("missing eval report")?;
    let wall: f64 = fx.base.stages.iter().map(|s| s.wall_clock_secs).sum();
    if report.asr < 0.60 {
        return Err(format!("asr {:.3} < 0.60", report.asr));
    }
    if report.utility < fx.clean_utility - 0.10 {
        return Err(format!(
            "utility {:.3} more than 10pp below clean control {:.3}",
            report.utility, fx.clean_utility
        ));
    }
    if wall > 3.0 * 3600.0 {
        return Err(format!("pipeline took {wall:.0}s > 3h"));
    }
    Ok(format!(
        "asr={:.3} utility={:.3} clean={:.3} wall={:.0}s",
        report.asr, report.utility, fx.clean_utility, wall
    ))
}

// criterion 2: the transporter and matching losses agree with hand oracles
fn loss_oracles(_fx: &Fixture) -> Check {
    // visual loss is a mean absolute difference
    let a = Array3::from_shape_fn((3, 4, 4), |(c, h, w)| (c + h + w) as f64 * 0.01);
    let b = a.mapv(|v| v + 0.125);
    let v = e(visual_loss(&a, &b))?;
    if (v - 0.125).abs() > 1e-12 {
        return Err(format!("visual loss {v} != 0.125"));
    }
    // semantic loss matches an explicit feature-space loop, and the total is
    // the weighted sum of the two terms
    let mut rng = rng_for(3, "acceptance-loss");
    let res = 16;
    let backbone = e(build_classifier::<f64, _>(ArchId::ToyCnn, 4, res, &mut rng))?;
    let mut ext = FeatureExtractor::new(backbone);
    let x_c = Array3::from_shape_fn((3, res, res), |_| rng.random_range(0.0..1.0));
    let x_o = Array3::from_shape_fn((3, res, res), |_| rng.random_range(0.0..1.0));
    let x_h = Array3::from_shape_fn((3, res, res), |_| rng.random_range(0.0..1.0));
    let s = e(semantic_loss(&mut ext, &x_c, &x_h))?;
    let f_c = ext.features(&x_c.clone().insert_axis(Axis(0)));
    let f_h = ext.features(&x_h.clone().insert_axis(Axis(0)));
    let reference: f64 =
        f_c.iter().zip(f_h.iter()).map(|(&p, &q)| (p - q).abs()).sum::<f64>() / f_c.len() as f64;
    if (s - reference).abs() > 1e-9 {
        return Err(format!("semantic loss {s} != reference {reference}"));
    }
    let weights = LossWeights { lambda_v: 0.7, lambda_s: 1.3 };
    let total = e(total_loss(&weights, &x_c, &x_o, &x_h, &mut ext))?;
    let want = 0.7 * e(visual_loss(&x_c, &x_o))? + 1.3 * s;
    if (total - want).abs() > 1e-9 {
        return Err(format!("total loss {total} != {want}"));
    }
    // normalized trajectory distance on hand points
    let t0 = [0.0, 0.0];
    let t1 = [1.0, 1.0];
    let hat = [2.0, 0.0];
    let l = e(trajectory_loss(&hat, &t0, &t1))?;
    if (l - 1.0).abs() > 1e-12 {
        return Err(format!("trajectory loss {l} != 1.0"));
    }
    let zero = e(trajectory_loss(&t1, &t0, &t1))?;
    if zero.abs() > 1e-12 {
        return Err(format!("trajectory loss at the expert endpoint is {zero}"));
    }
    Ok(format!("visual={v:.3} semantic={s:.4} total={total:.4}"))
}

// criterion 3: a maximally uninformative observer scores every patch at
// -2 ln K, and selection is an exact top-N
fn realism_and_selection_oracle(_fx: &Fixture) -> Check {
    let k = 10;
    let res = 16;
    let mut obs = Observer::new(e(build_classifier::<f64, _>(
        ArchId::ToyCnn,
        k,
        res,
        &mut rng_for(5, "acceptance-obs"),
    ))?);
    for (name, p) in obs.classifier.named_params_mut() {
        if name.starts_with("head") {
            p.value.fill(0.0);
        }
    }
    let mut rng = rng_for(6, "acceptance-patch");
    let want = -2.0 * (k as f64).ln();
    for trial in 0..5 {
        let patch = Array3::from_shape_fn((3, res, res), |_| rng.random_range(0.0..1.0));
        let s = e(realism_score(&mut obs, trial % k, &patch, (trial + 3) % k))?;
        if (s - want).abs() > 1e-9 {
            return Err(format!("uniform observer score {s} != {want}"));
        }
    }
    // selection equals a brute-force sort of the scores
    let pool: Vec<Patch<f64>> = (0..200)
        .map(|i| Patch {
            pixels: Array3::zeros((3, 2, 2)),
            parent_id: i,
            grid_pos: (0, 0),
            score: rng.random_range(-5.0..0.0),
        })
        .collect();
    let picked = e(select_key_patches(pool.clone(), 0, 9))?;
    let mut sorted: Vec<f64> = pool.iter().map(|p| p.score).collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let got: Vec<f64> = picked.iter().map(|p| p.score).collect();
    if got != sorted[..9] {
        return Err("top-N selection differs from the sort oracle".into());
    }
    Ok(format!("uniform score={want:.4}, top-9 selection exact"))
}

// criterion 4: the exact meta-gradients of the matching loss agree with
// central finite differences
fn matching_gradients_check(_fx: &Fixture) -> Check {
    let (batch, dim, classes, steps) = (6, 10, 4, 3);
    let mut rng = rng_for(11, "acceptance-fd");
    let z = Array2::from_shape_fn((batch, dim), |_| rng.random_range(-1.0..1.0f64));
    let mut y = Array2::zeros((batch, classes));
    for i in 0..batch {
        y[[i, i % classes]] = 1.0;
    }
    let theta_start: Vec<f64> =
        (0..classes * dim + classes).map(|_| rng.random_range(-0.5..0.5)).collect();
    let theta_end: Vec<f64> =
        theta_start.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    let lr = 0.07;
    let grads = e(matching_loss_and_grads(&z, &y, lr, &theta_start, &theta_end, steps))?;
    let loss_at = |z: &Array2<f64>, lr: f64| -> Result<f64, String> {
        Ok(e(matching_loss_and_grads(z, &y, lr, &theta_start, &theta_end, steps))?.loss)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &(i, j) in &[(0, 0), (1, 3), (2, 7), (4, 9), (5, 5)] {
        let mut zp = z.clone();
        zp[[i, j]] += h;
        let mut zm = z.clone();
        zm[[i, j]] -= h;
        let fd = (loss_at(&zp, lr)? - loss_at(&zm, lr)?) / (2.0 * h);
        let an = grads.d_features[[i, j]];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    let fd_lr = (loss_at(&z, lr + h)? - loss_at(&z, lr - h)?) / (2.0 * h);
    let rel_lr = (fd_lr - grads.d_lr).abs() / fd_lr.abs().max(grads.d_lr.abs()).max(1e-8);
    worst = worst.max(rel_lr);
    if worst > 1e-4 {
        return Err(format!("finite-difference rel error {worst:.2e} > 1e-4"));
    }
    Ok(format!("worst rel error {worst:.2e}"))
}

// criterion 5: grid tiling is exactly invertible and artifacts survive a
// bit-identical round trip with tamper detection
fn tiling_and_persistence(fx: &Fixture) -> Check {
    let mut rng = rng_for(13, "acceptance-tile");
    let img = Array3::from_shape_fn((3, 24, 24), |_| rng.random_range(0.0..1.0f64));
    for grid in [(2, 2), (3, 3), (4, 2)] {
        let ps = e(crop_patches(&img, 0, grid))?;
        if reassemble_grid(&ps, grid) != img {
            return Err(format!("tiling round trip failed for grid {grid:?}"));
        }
    }
    // re-save the pipeline's own osmosis artifact and compare content hashes
    let src = stage_path(&fx.base, "osmosis")?.join("osmosis");
    let osmosis = match e(load_artifact::<f32>(&src, ArtifactKind::OsmosisSet))? {
        Artifact::OsmosisSet(s) => s,
        _ => return Err("unexpected artifact kind".into()),
    };
    let tmp = tempfile::tempdir().map_err(|err| err.to_string())?;
    let copy = tmp.path().join("osmosis");
    e(save_artifact(&copy, &Artifact::OsmosisSet(osmosis)))?;
    let reread = match e(load_artifact::<f32>(&copy, ArtifactKind::OsmosisSet))? {
        Artifact::OsmosisSet(s) => s,
        _ => return Err("unexpected artifact kind".into()),
    };
    let copy2 = tmp.path().join("osmosis2");
    e(save_artifact(&copy2, &Artifact::OsmosisSet(reread)))?;
    let h1 = e(dodkit_core::experiments::hash_dir(&copy))?;
    let h2 = e(dodkit_core::experiments::hash_dir(&copy2))?;
    if h1 != h2 {
        return Err("osmosis artifact round trip is not bit-identical".into());
    }
    // a flipped byte must be caught by the content hash
    let images = copy.join("images.f32");
    let mut bytes = std::fs::read(&images).map_err(|err| err.to_string())?;
    bytes[0] ^= 0xff;
    std::fs::write(&images, bytes).map_err(|err| err.to_string())?;
    match load_artifact::<f32>(&copy, ArtifactKind::OsmosisSet) {
        Err(Error::HashMismatch { field, .. }) if field == "content_hash" => {}
        other => return Err(format!("tampering not detected: {other:?}")),
    }
    Ok(format!("tiling exact, round trip hash {h1:.8}..."))
}

// criterion 6: more images per class buys attack success
fn ipc_monotonicity(fx: &Fixture) -> Check {
    let base_asr = fx.base.report.as_ref().ok_or("missing report")?.asr;
    let low_cfg = e(fx.cfg.with_axis_value(SweepAxis::Ipc, &serde_json::json!(1)))?;
    let low = e(run_pipeline::<f32>(&low_cfg, &fx.root))?;
    completed(&low)?;
    let low_asr = low.report.as_ref().ok_or("missing report")?.asr;
    if base_asr < low_asr + 0.10 {
        return Err(format!("asr(ipc=10)={base_asr:.3} < asr(ipc=1)={low_asr:.3} + 0.10"));
    }
    Ok(format!("asr(ipc=1)={low_asr:.3} asr(ipc=10)={base_asr:.3}"))
}

// criterion 7: diluting the synthetic stream with real data suppresses the
// attack
fn dilution_trend(fx: &Fixture) -> Check {
    let asr_at = |ratio: f64| -> Result<f64, String> {
        let cfg = e(fx.cfg.with_axis_value(SweepAxis::Dilution, &serde_json::json!(ratio)))?;
        let record = e(run_pipeline::<f32>(&cfg, &fx.root))?;
        completed(&record)?;
        Ok(record.report.as_ref().ok_or("missing report")?.asr)
    };
    let light = asr_at(0.1)?;
    let heavy = asr_at(0.9)?;
    if heavy > light - 0.15 {
        return Err(format!("asr@0.9={heavy:.3} not <= asr@0.1={light:.3} - 0.15"));
    }
    Ok(format!("asr@0.1={light:.3} asr@0.9={heavy:.3}"))
}

// criterion 8: perturbation entropies stay within [0, ln K] and the
// attack/benign entropy histograms overlap substantially
fn strip_stealth(fx: &Fixture) -> Check {
    let cfg = &fx.cfg;
    let dod = load_dod(&fx.base)?;
    let mut victim =
        e(VictimModel::<f32>::load(&stage_path(&fx.base, "hijack")?.join("victim")))?;
    let orig_train = e(load_dataset::<f32>(&cfg.original, Split::Train))?;
    let orig_test = e(load_dataset::<f32>(&cfg.original, Split::Test))?;
    let n = 40.min(dod.images.dim().0).min(orig_test.images.dim().0);
    let attack = dod.images.slice(ndarray::s![..n, .., .., ..]).to_owned();
    let benign = orig_test.images.slice(ndarray::s![..n, .., .., ..]).to_owned();
    let overlays = orig_train
        .images
        .slice(ndarray::s![..200.min(orig_train.images.dim().0), .., .., ..])
        .to_owned();
    let result = e(strip_report(
        &mut victim,
        &attack,
        &benign,
        &overlays,
        &StripConfig::default(),
        31,
    ))?;
    let ln_k = (cfg.original.num_classes as f64).ln();
    for &ent in result.entropies_attack.iter().chain(&result.entropies_benign) {
        if !(0.0..=ln_k + 1e-9).contains(&ent) {
            return Err(format!("entropy {ent:.4} outside [0, ln K={ln_k:.4}]"));
        }
    }
    if result.overlap_statistic < 0.4 {
        return Err(format!("entropy overlap {:.3} < 0.4", result.overlap_statistic));
    }
    Ok(format!("overlap={:.3} over n={n} queries", result.overlap_statistic))
}

// criterion 9: per-sample clipping is never exceeded and the zero-noise,
// infinite-clip limit reproduces ordinary SGD
fn dp_invariants(fx: &Fixture) -> Check {
    let cfg = &fx.cfg;
    let dod = load_dod(&fx.base)?;
    let res = cfg.original.resolution.0;
    let train = TrainCfg {
        epochs: 1,
        batch_size: 16,
        learning_rate: 0.05,
        optimizer: dodkit_core::models::OptimizerKind::Sgd,
    };
    // tight clip bound: the reported max clipped norm must respect it
    let clip = 0.05;
    let mut victim = e(VictimModel::<f32>::new(cfg.victim.arch, cfg.original.num_classes, res, 3))?;
    let privacy = PrivacyConfig {
        clip_norm: clip,
        noise_multiplier: 1.0,
        epsilon_budget: f64::INFINITY,
        delta: 1e-5,
    };
    let out = e(dpsgd_finetune(
        &mut victim,
        &dod.images,
        &dod.soft_labels,
        &train,
        &privacy,
        17,
    ))?;
    if out.max_clipped_norm > clip + 1e-9 {
        return Err(format!("clipped norm {} exceeds bound {clip}", out.max_clipped_norm));
    }
    // degenerate limit: full batch, no noise, unreachable clip == plain SGD
    let full = TrainCfg { batch_size: dod.images.dim().0, ..train.clone() };
    let mut dp = e(VictimModel::<f32>::new(cfg.victim.arch, cfg.original.num_classes, res, 5))?;
    let mut plain = dp.clone();
    let degenerate = PrivacyConfig {
        clip_norm: 1e9,
        noise_multiplier: 0.0,
        epsilon_budget: f64::INFINITY,
        delta: 1e-5,
    };
    e(dpsgd_finetune(&mut dp, &dod.images, &dod.soft_labels, &full, &degenerate, 23))?;
    e(dodkit_core::models::fit(
        &mut plain.classifier,
        &dod.images,
        &dod.soft_labels,
        &full,
        &mut rng_for(0, "unused"),
        |_, _| {},
    ))?;
    let mut diff: f64 = 0.0;
    for ((_, a), (_, b)) in dp
        .classifier
        .named_params()
        .iter()
        .zip(plain.classifier.named_params().iter())
    {
        for (x, y) in a.value.iter().zip(b.value.iter()) {
            diff = diff.max((*x as f64 - *y as f64).abs());
        }
    }
    if diff > 1e-6 {
        return Err(format!("degenerate DP run deviates from SGD by {diff:.2e}"));
    }
    Ok(format!(
        "max clipped norm {:.4} <= {clip}, degenerate deviation {diff:.2e}",
        out.max_clipped_norm
    ))
}

// criterion 10: a victim trained on a clean distilled set does not exhibit
// the hijacking behavior
fn clean_control(fx: &Fixture) -> Check {
    let chance = 1.0 / fx.cfg.hijacking.num_classes as f64;
    if fx.clean_asr > 2.0 * chance {
        return Err(format!(
            "clean-control asr {:.3} > 2x chance {:.3}",
            fx.clean_asr,
            2.0 * chance
        ));
    }
    Ok(format!("clean asr={:.3}, chance={chance:.3}", fx.clean_asr))
}

#[test]
fn acceptance() {
    let fx = match build_fixture() {
        Ok(fx) => fx,
        Err(msg) => panic!("acceptance fixture failed to build: {msg}"),
    };
    let criteria: Vec<(&str, fn(&Fixture) -> Check)> = vec![
        ("end-to-end attack", end_to_end_attack),
        ("loss oracles", loss_oracles),
        ("realism and selection oracle", realism_and_selection_oracle),
        ("matching gradient check", matching_gradients_check),
        ("tiling and persistence", tiling_and_persistence),
        ("ipc monotonicity", ipc_monotonicity),
        ("dilution trend", dilution_trend),
        ("strip stealth", strip_stealth),
        ("dp invariants", dp_invariants),
        ("clean control", clean_control),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check(&fx) {
            Ok(detail) => println!("criterion {:02} ({name}): PASS ({detail})", i + 1),
            Err(msg) => {
                failures += 1;
                println!("criterion {:02} ({name}): FAIL ({msg})", i + 1);
            }
        }
    }
    assert_eq!(failures, 0, "{failures} acceptance criteria failed");
}
