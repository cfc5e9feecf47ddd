//! Staged experiment pipeline with content-addressed caching.
//!
//! Stages: osmosis (extractor + transporter training + osmosis set),
//! trajectories (surrogate + expert buffer), distill (DOD), hijack (victim
//! fine-tune + evaluation), defense (optional probes). Each stage persists
//! its outputs under a directory keyed by the hash of its config subtree and
//! its upstream output hashes, so unchanged stages are reused.

use super::config::{ExperimentConfig, SweepAxis};
use super::store::{
    hash_dir, hash_json, load_artifact, save_artifact, Artifact, ArtifactKind,
};
use crate::datasets::{class_mean_images, load_dataset, LabelMapping, LoadedDataset, Split};
use crate::defense::{
    dpsgd_finetune, feature_projection, silhouette_score, strip_report, PrivacySpent, StripResult,
};
use crate::distiller::{distill, osmosis_arrays, record_expert_trajectory, DistilledOsmosisSet, Surrogate};
use crate::error::{Error, Result};
use crate::hijack::{
    evaluate_asr, evaluate_utility, run_hijack_experiment, training_arrays, EvalReport,
    HijackEvalContext, VictimModel,
};
use crate::models::{build_classifier, fit};
use crate::nn::one_hot;
use crate::rng_for;
use crate::scalar::Scalar;
use crate::transporter::{train_transporter, FeatureExtractor, OsmosisSample, Transporter};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub name: String,
    pub path: PathBuf,
    pub wall_clock_secs: f64,
    pub cached: bool,
    pub output_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed { stage: String, message: String },
}

/// Which sweep point produced a record, if any.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AxisPoint {
    pub axis: SweepAxis,
    pub value: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DpSummary {
    pub spent: PrivacySpent,
    pub epoch_losses: Vec<f64>,
    pub max_clipped_norm: f64,
    pub utility: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct DefenseOutputs {
    pub strip: Option<StripResult>,
    pub privacy: Option<DpSummary>,
    pub projection_csv: Option<PathBuf>,
    /// Silhouette of synthetic vs. real groups in the projection; low values
    /// mean the distilled images blend into the benign feature cloud.
    pub tag_silhouette: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub fingerprint: String,
    pub status: RunStatus,
    pub stages: Vec<StageRecord>,
    pub report: Option<EvalReport>,
    pub defense: Option<DefenseOutputs>,
    pub axis: Option<AxisPoint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageMeta {
    name: String,
    key: String,
    output_hash: String,
    wall_clock_secs: f64,
}

/// Run `build` into a cache directory keyed by `key`, or reuse the existing
/// output. Builds land in a temp directory and are renamed into place, so a
/// partially written stage is never mistaken for a finished one.
fn with_stage(
    root: &Path,
    name: &str,
    key: &str,
    build: impl FnOnce(&Path) -> Result<()>,
) -> Result<StageRecord> {
    let stages = root.join("stages");
    fs::create_dir_all(&stages)?;
    let final_dir = stages.join(format!("{name}-{key}"));
    let meta_path = final_dir.join("stage.json");
    if meta_path.is_file() {
        let meta: StageMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
        if meta.key == key {
            log::info!("stage {name}: cache hit");
            return Ok(StageRecord {
                name: name.to_string(),
                path: final_dir,
                wall_clock_secs: meta.wall_clock_secs,
                cached: true,
                output_hash: meta.output_hash,
            });
        }
    }
    let tmp = stages.join(format!(".tmp-{name}-{key}"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let start = Instant::now();
    if let Err(e) = build(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    let wall = start.elapsed().as_secs_f64();
    let output_hash = hash_dir(&tmp)?;
    let meta = StageMeta {
        name: name.to_string(),
        key: key.to_string(),
        output_hash: output_hash.clone(),
        wall_clock_secs: wall,
    };
    fs::write(tmp.join("stage.json"), serde_json::to_vec_pretty(&meta)?)?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    fs::rename(&tmp, &final_dir)?;
    log::info!("stage {name}: built in {wall:.1}s");
    Ok(StageRecord {
        name: name.to_string(),
        path: final_dir,
        wall_clock_secs: wall,
        cached: false,
        output_hash,
    })
}

fn cfg_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config fragment serializes")
}

fn persist_record(root: &Path, record: &RunRecord) -> Result<()> {
    let runs = root.join("runs");
    fs::create_dir_all(&runs)?;
    let tmp = runs.join(format!(".tmp-{}.json", record.fingerprint));
    fs::write(&tmp, serde_json::to_vec_pretty(record)?)?;
    fs::rename(&tmp, runs.join(format!("{}.json", record.fingerprint)))?;
    Ok(())
}

pub fn load_record(root: &Path, fingerprint: &str) -> Result<RunRecord> {
    let path = root.join("runs").join(format!("{fingerprint}.json"));
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Named pipeline stage, used to bound partial runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Osmosis,
    Trajectories,
    Distill,
    Hijack,
    Defense,
}

/// Execute the full pipeline under the given artifact root. Stage failures
/// are captured in the returned record's status; completed stages stay on
/// disk for resumption.
pub fn run_pipeline<F: Scalar>(config: &ExperimentConfig, root: &Path) -> Result<RunRecord> {
    run_pipeline_tagged::<F>(config, root, None, PipelineStage::Defense)
}

/// Like [`run_pipeline`] but stops after `until`, leaving later stages for a
/// subsequent run to pick up from the cache.
pub fn run_pipeline_until<F: Scalar>(
    config: &ExperimentConfig,
    root: &Path,
    until: PipelineStage,
) -> Result<RunRecord> {
    run_pipeline_tagged::<F>(config, root, None, until)
}

pub(super) fn run_pipeline_tagged<F: Scalar>(
    config: &ExperimentConfig,
    root: &Path,
    axis: Option<AxisPoint>,
    until: PipelineStage,
) -> Result<RunRecord> {
    config.validate()?;
    let mut record = RunRecord {
        fingerprint: config.fingerprint(),
        status: RunStatus::Complete,
        stages: Vec::new(),
        report: None,
        defense: None,
        axis,
    };
    if let Err((stage, err)) = execute::<F>(config, root, &mut record, until) {
        log::error!("stage {stage} failed: {err}");
        record.status = RunStatus::Failed { stage, message: err.to_string() };
    }
    persist_record(root, &record)?;
    Ok(record)
}

type StageResult<T> = std::result::Result<T, (String, Error)>;

fn at<T>(stage: &str, r: Result<T>) -> StageResult<T> {
    r.map_err(|e| (stage.to_string(), e))
}

fn execute<F: Scalar>(
    cfg: &ExperimentConfig,
    root: &Path,
    record: &mut RunRecord,
    until: PipelineStage,
) -> StageResult<()> {
    let seed = cfg.seed;
    let orig_train: LoadedDataset<F> = at("data", load_dataset(&cfg.original, Split::Train))?;
    let orig_test: LoadedDataset<F> = at("data", load_dataset(&cfg.original, Split::Test))?;
    let hij_train: LoadedDataset<F> = at("data", load_dataset(&cfg.hijacking, Split::Train))?;
    let hij_test: LoadedDataset<F> = at("data", load_dataset(&cfg.hijacking, Split::Test))?;
    let mapping = at(
        "data",
        LabelMapping::new(
            cfg.original.num_classes,
            cfg.hijacking.num_classes,
            cfg.mapping.strategy,
            cfg.mapping.seed,
        ),
    )?;
    let k_o = cfg.original.num_classes;
    let resolution = cfg.original.resolution.0;

    // --- osmosis: feature extractor, transporter training, osmosis set ---
    let osmosis_key = hash_json(&serde_json::json!({
        "stage": "osmosis",
        "seed": seed,
        "original": cfg_value(&cfg.original),
        "hijacking": cfg_value(&cfg.hijacking),
        "mapping": cfg_value(&cfg.mapping),
        "transporter": cfg_value(&cfg.transporter),
    }));
    let osmosis_stage = at(
        "osmosis",
        with_stage(root, "osmosis", &osmosis_key, |dir| {
            // the semantic target space is the hijack task's: warming the
            // extractor up on the hijacking data makes the semantic loss move
            // hijack-class information into x_c while leaving the original
            // task's visual cues comparatively untouched
            let mut backbone = build_classifier(
                cfg.transporter.extractor.arch,
                cfg.hijacking.num_classes,
                resolution,
                &mut rng_for(seed, "extractor-init"),
            )?;
            let targets = one_hot(&hij_train.labels, cfg.hijacking.num_classes);
            fit(
                &mut backbone,
                &hij_train.images,
                &targets,
                &cfg.transporter.extractor.warmup,
                &mut rng_for(seed, "extractor-warmup"),
                |_, _| {},
            )?;
            let mut extractor = FeatureExtractor::new(backbone);
            let outcome = train_transporter(
                &orig_train,
                &hij_train,
                &mapping,
                &mut extractor,
                &cfg.transporter.weights,
                cfg.transporter.unet,
                &cfg.transporter.train,
                seed,
            )?;
            outcome.model.save(&dir.join("transporter"), &cfg.transporter.weights, seed)?;
            save_artifact(&dir.join("osmosis"), &Artifact::OsmosisSet(outcome.osmosis))?;
            fs::write(
                dir.join("meta.json"),
                serde_json::to_vec_pretty(&serde_json::json!({
                    "epoch_losses": outcome.epoch_losses,
                }))?,
            )?;
            Ok(())
        }),
    )?;
    record.stages.push(osmosis_stage.clone());
    if until == PipelineStage::Osmosis {
        return Ok(());
    }

    // --- trajectories: surrogate warmup + expert buffer ---
    let traj_key = hash_json(&serde_json::json!({
        "stage": "trajectories",
        "upstream": osmosis_stage.output_hash,
        "surrogate_arch": cfg_value(&cfg.distill.surrogate_arch),
        "surrogate_warmup": cfg_value(&cfg.distill.surrogate_warmup),
        "trajectories": cfg_value(&cfg.distill.trajectories),
    }));
    let osmosis_dir = osmosis_stage.path.clone();
    let traj_stage = at(
        "trajectories",
        with_stage(root, "trajectories", &traj_key, |dir| {
            let osmosis = load_osmosis::<F>(&osmosis_dir)?;
            let (images, targets) = osmosis_arrays(&osmosis, k_o)?;
            let mut surrogate = Surrogate::prepare(
                &images,
                &targets,
                cfg.distill.surrogate_arch,
                &cfg.distill.surrogate_warmup,
                seed,
            )?;
            surrogate.save(&dir.join("surrogate"))?;
            for k in 0..cfg.distill.trajectories.count.max(1) {
                let traj = record_expert_trajectory(
                    &osmosis,
                    &mut surrogate,
                    &cfg.distill.trajectories.train,
                    cfg.distill.trajectories.snapshot_interval,
                    seed.wrapping_add(k as u64),
                )?;
                save_artifact(&dir.join(format!("traj_{k:02}")), &Artifact::Trajectory(traj))?;
            }
            Ok(())
        }),
    )?;
    record.stages.push(traj_stage.clone());
    if until == PipelineStage::Trajectories {
        return Ok(());
    }

    // --- distill: observer + trajectory-matching optimization ---
    let distill_key = hash_json(&serde_json::json!({
        "stage": "distill",
        "upstream": [&osmosis_stage.output_hash, &traj_stage.output_hash],
        "params": cfg_value(&cfg.distill.params),
        "observer_train": cfg_value(&cfg.distill.observer_train),
    }));
    let traj_dir = traj_stage.path.clone();
    let distill_stage = at(
        "distill",
        with_stage(root, "distill", &distill_key, |dir| {
            let osmosis = load_osmosis::<F>(&osmosis_dir)?;
            let mut surrogate = Surrogate::<F>::load(&traj_dir.join("surrogate"))?;
            let mut buffer = Vec::with_capacity(cfg.distill.trajectories.count);
            for k in 0..cfg.distill.trajectories.count.max(1) {
                match load_artifact::<F>(&traj_dir.join(format!("traj_{k:02}")), ArtifactKind::Trajectory)? {
                    Artifact::Trajectory(t) => buffer.push(t),
                    _ => unreachable!("kind checked by load_artifact"),
                }
            }
            let mut observer = super::control::train_observer(cfg, &orig_train, &osmosis, seed)?;
            let out = distill(
                &osmosis,
                &buffer,
                &mut surrogate,
                &mut observer,
                &mapping,
                &cfg.distill.params,
                seed,
            )?;
            save_artifact(&dir.join("dod"), &Artifact::Dod(out.dod))?;
            fs::write(
                dir.join("meta.json"),
                serde_json::to_vec_pretty(&serde_json::json!({
                    "epoch_losses": out.epoch_losses,
                    "final_syn_lr": out.final_syn_lr,
                }))?,
            )?;
            Ok(())
        }),
    )?;
    record.stages.push(distill_stage.clone());
    if until == PipelineStage::Distill {
        return Ok(());
    }

    // --- hijack: dilution, victim fine-tune, evaluation ---
    let hijack_key = hash_json(&serde_json::json!({
        "stage": "hijack",
        "upstream": [&osmosis_stage.output_hash, &distill_stage.output_hash],
        "victim": cfg_value(&cfg.victim),
        "dilution_ratio": cfg.dilution_ratio,
    }));
    let distill_dir = distill_stage.path.clone();
    let hijack_stage = {
        let hijack_key = hijack_key.clone();
        at(
            "hijack",
            with_stage(root, "hijack", &hijack_key, |dir| {
                let dod = load_dod::<F>(&distill_dir)?;
                let (mut transporter, _, _) =
                    Transporter::<F>::load(&osmosis_dir.join("transporter"))?;
                let diluted = dod.dilute(&orig_train, cfg.dilution_ratio, seed)?;
                let (images, targets) = training_arrays(&diluted)?;
                let carriers = class_mean_images(&orig_train);
                let mut ctx = HijackEvalContext {
                    transporter: &mut transporter,
                    mapping: &mapping,
                    original_test: &orig_test,
                    hijack_test: &hij_test,
                    carriers: &carriers,
                    query_mode: cfg.victim.query_mode,
                };
                let (victim, report) = run_hijack_experiment(
                    &images,
                    &targets,
                    cfg.victim.arch,
                    &cfg.victim.finetune,
                    &mut ctx,
                    &hijack_key,
                    seed,
                )?;
                victim.save(&dir.join("victim"))?;
                save_artifact(&dir.join("report"), &Artifact::<F>::Report(report))?;
                Ok(())
            }),
        )?
    };
    record.report = Some(at("hijack", load_report(&hijack_stage.path))?);
    record.stages.push(hijack_stage.clone());
    if until == PipelineStage::Hijack {
        return Ok(());
    }

    // --- defense: optional probes against the trained victim ---
    if cfg.defense.any_enabled() {
        let defense_key = hash_json(&serde_json::json!({
            "stage": "defense",
            "upstream": hijack_stage.output_hash,
            "defense": cfg_value(&cfg.defense),
        }));
        let hijack_dir = hijack_stage.path.clone();
        let defense_stage = at(
            "defense",
            with_stage(root, "defense", &defense_key, |dir| {
                let mut victim = VictimModel::<F>::load(&hijack_dir.join("victim"))?;
                let dod = load_dod::<F>(&distill_dir)?;
                let (mut transporter, _, _) =
                    Transporter::<F>::load(&osmosis_dir.join("transporter"))?;
                let mut outputs = DefenseOutputs::default();
                if let Some(strip) = &cfg.defense.strip {
                    let n = strip.sample_count;
                    let attack = take_images(&dod.images, n);
                    let benign = take_images(&orig_test.images, n);
                    let overlays = take_images(&orig_train.images, 200);
                    outputs.strip = Some(strip_report(
                        &mut victim,
                        &attack,
                        &benign,
                        &overlays,
                        &strip.probe,
                        seed,
                    )?);
                }
                if let Some(dp) = &cfg.defense.privacy {
                    let mut dp_victim =
                        VictimModel::<F>::new(cfg.victim.arch, k_o, resolution, seed)?;
                    let out = dpsgd_finetune(
                        &mut dp_victim,
                        &dod.images,
                        &dod.soft_labels,
                        &dp.train,
                        &dp.privacy,
                        seed,
                    )?;
                    let utility = evaluate_utility(&mut dp_victim, &orig_test)?;
                    let carriers = class_mean_images(&orig_train);
                    let asr = evaluate_asr(
                        &mut dp_victim,
                        &mut transporter,
                        &mapping,
                        &hij_test,
                        &carriers,
                        cfg.victim.query_mode,
                    )?;
                    outputs.privacy = Some(DpSummary {
                        spent: out.spent,
                        epoch_losses: out.epoch_losses,
                        max_clipped_norm: out.max_clipped_norm,
                        utility: utility.fraction,
                        asr: asr.fraction,
                    });
                }
                if let Some(proj) = &cfg.defense.projection {
                    let n_syn = proj.per_group.min(dod.images.dim().0);
                    let n_real = proj.per_group.min(orig_test.images.dim().0);
                    let mut images = ndarray::Array4::zeros((
                        n_syn + n_real,
                        3,
                        resolution,
                        resolution,
                    ));
                    let mut classes = Vec::new();
                    let mut tags = Vec::new();
                    for i in 0..n_syn {
                        images
                            .index_axis_mut(Axis(0), i)
                            .assign(&dod.images.index_axis(Axis(0), i));
                        classes.push(dod.class_ids[i]);
                        tags.push("synthetic".to_string());
                    }
                    for i in 0..n_real {
                        images
                            .index_axis_mut(Axis(0), n_syn + i)
                            .assign(&orig_test.images.index_axis(Axis(0), i));
                        classes.push(orig_test.labels[i]);
                        tags.push("real".to_string());
                    }
                    let projection = feature_projection(
                        &mut victim,
                        &images,
                        &classes,
                        &tags,
                        &proj.tsne,
                        seed,
                    )?;
                    let csv_path = dir.join("projection.csv");
                    projection.write_csv(&csv_path)?;
                    let pts = Array2::from_shape_fn((projection.points.len(), 2), |(i, k)| {
                        if k == 0 { projection.points[i].x } else { projection.points[i].y }
                    });
                    let groups: Vec<usize> = projection
                        .points
                        .iter()
                        .map(|p| usize::from(p.tag == "real"))
                        .collect();
                    outputs.tag_silhouette = Some(silhouette_score(&pts, &groups)?);
                    outputs.projection_csv = Some(csv_path);
                }
                fs::write(dir.join("defense.json"), serde_json::to_vec_pretty(&outputs)?)?;
                Ok(())
            }),
        )?;
        let mut outputs: DefenseOutputs = at(
            "defense",
            fs::read(defense_stage.path.join("defense.json"))
                .map_err(Error::from)
                .and_then(|b| serde_json::from_slice(&b).map_err(Error::from)),
        )?;
        // the CSV was written while the stage built in a temp dir; point at
        // its final location
        if outputs.projection_csv.is_some() {
            outputs.projection_csv = Some(defense_stage.path.join("projection.csv"));
        }
        record.defense = Some(outputs);
        record.stages.push(defense_stage);
    }
    Ok(())
}

fn take_images<F: Scalar>(images: &ndarray::Array4<F>, n: usize) -> ndarray::Array4<F> {
    let n = n.min(images.dim().0);
    images.slice(ndarray::s![..n, .., .., ..]).to_owned()
}

fn load_osmosis<F: Scalar>(osmosis_stage_dir: &Path) -> Result<Vec<OsmosisSample<F>>> {
    match load_artifact::<F>(&osmosis_stage_dir.join("osmosis"), ArtifactKind::OsmosisSet)? {
        Artifact::OsmosisSet(s) => Ok(s),
        _ => unreachable!("kind checked by load_artifact"),
    }
}

fn load_dod<F: Scalar>(distill_stage_dir: &Path) -> Result<DistilledOsmosisSet<F>> {
    match load_artifact::<F>(&distill_stage_dir.join("dod"), ArtifactKind::Dod)? {
        Artifact::Dod(d) => Ok(d),
        _ => unreachable!("kind checked by load_artifact"),
    }
}

fn load_report(hijack_stage_dir: &Path) -> Result<EvalReport> {
    match load_artifact::<f32>(&hijack_stage_dir.join("report"), ArtifactKind::Report)? {
        Artifact::Report(r) => Ok(r),
        _ => unreachable!("kind checked by load_artifact"),
    }
}
