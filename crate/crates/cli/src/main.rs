//! `dodkit`: command-line front end for the experiment pipeline.
//!
//! Each subcommand runs the staged pipeline up to its stage, reusing cached
//! stages under the artifact root. Logs go to stderr; the final lines on
//! stdout are machine-parsable `key=value` summaries.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing
//! artifact, 4 runtime failure.

use clap::{Parser, Subcommand};
use dodkit_core::experiments::{
    artifact_root, emit_report, load_record, run_pipeline_until, run_sweep, ExperimentConfig,
    PipelineStage, RunRecord, RunStatus,
};
use dodkit_core::{Elem, Error};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dodkit", version, about = "Distilled-dataset hijacking research toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment configuration JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config field by dotted key, e.g. distill.params.ipc=5.
    /// The value is parsed as JSON, falling back to a plain string.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Artifact root; falls back to $DODKIT_ARTIFACT_ROOT, then ./artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Verbose logging on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the transporter and emit the osmosis sample set.
    Osmose,
    /// Distill the osmosis set into the synthetic training set.
    Distill,
    /// Fine-tune and evaluate a victim on the distilled set.
    Hijack,
    /// Run the configured defense probes against the trained victim.
    Defend,
    /// Run the pipeline once per configured sweep-axis value.
    Sweep,
    /// Render report.json / report.md / plots from persisted run records.
    Report,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Debug } else { log::LevelFilter::Info })
        .init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let cfg = load_config(cli)?;
    let root = cli
        .out
        .clone()
        .unwrap_or_else(artifact_root);
    match &cli.command {
        Cmd::Osmose => run_stage(&cfg, &root, PipelineStage::Osmosis),
        Cmd::Distill => run_stage(&cfg, &root, PipelineStage::Distill),
        Cmd::Hijack => run_stage(&cfg, &root, PipelineStage::Hijack),
        Cmd::Defend => {
            if !cfg.defense.any_enabled() {
                return Err(Error::Config(
                    "defend requires at least one defense probe in the config".into(),
                ));
            }
            run_stage(&cfg, &root, PipelineStage::Defense)
        }
        Cmd::Sweep => {
            let spec = cfg.sweep.clone().ok_or_else(|| {
                Error::Config("sweep requires a 'sweep' section in the config".into())
            })?;
            let records = run_sweep::<Elem>(&cfg, spec.axis, &spec.values, &root)?;
            let mut completed = 0;
            for (value, record) in spec.values.iter().zip(&records) {
                match &record.status {
                    RunStatus::Complete => {
                        completed += 1;
                        let (asr, utility) = metrics(record);
                        println!(
                            "point={value} status=complete asr={asr} utility={utility} fingerprint={}",
                            record.fingerprint
                        );
                    }
                    RunStatus::Failed { stage, message } => {
                        log::error!("point {value} failed in {stage}: {message}");
                        println!("point={value} status=failed stage={stage}");
                    }
                }
            }
            println!("points={} completed={completed}", records.len());
            Ok(if completed > 0 { 0 } else { EXIT_RUNTIME })
        }
        Cmd::Report => {
            let records = collect_records(&root)?;
            let out_dir = root.join("report");
            let bundle = emit_report(&records, &out_dir)?;
            println!("rows={}", records.len());
            println!("report_json={}", bundle.json.display());
            println!("report_md={}", bundle.markdown.display());
            Ok(0)
        }
    }
}

fn run_stage(cfg: &ExperimentConfig, root: &std::path::Path, until: PipelineStage) -> Result<u8, Error> {
    let record = run_pipeline_until::<Elem>(cfg, root, until)?;
    for stage in &record.stages {
        println!(
            "stage={} cached={} wall_clock_secs={:.3} output_hash={}",
            stage.name, stage.cached, stage.wall_clock_secs, stage.output_hash
        );
    }
    if let Some(report) = &record.report {
        println!("asr={} utility={}", report.asr, report.utility);
    }
    if let Some(defense) = &record.defense {
        if let Some(strip) = &defense.strip {
            println!("strip_overlap={}", strip.overlap_statistic);
        }
        if let Some(dp) = &defense.privacy {
            println!(
                "dp_epsilon={} dp_utility={} dp_asr={}",
                dp.spent.epsilon, dp.utility, dp.asr
            );
        }
        if let Some(s) = defense.tag_silhouette {
            println!("tag_silhouette={s}");
        }
    }
    println!("fingerprint={}", record.fingerprint);
    match &record.status {
        RunStatus::Complete => {
            println!("status=complete");
            Ok(0)
        }
        RunStatus::Failed { stage, message } => {
            eprintln!("stage {stage} failed: {message}");
            println!("status=failed stage={stage}");
            Ok(EXIT_RUNTIME)
        }
    }
}

fn metrics(record: &RunRecord) -> (f64, f64) {
    record
        .report
        .as_ref()
        .map(|r| (r.asr, r.utility))
        .unwrap_or((f64::NAN, f64::NAN))
}

/// Load the config file (or defaults), apply --override entries on the
/// materialized JSON, then the --seed override, and validate.
fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            ExperimentConfig::from_json(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    // overrides edit the fully materialized document so any field is reachable
    let mut value = serde_json::to_value(&cfg)?;
    for entry in &cli.overrides {
        apply_override(&mut value, entry)?;
    }
    let mut cfg = ExperimentConfig::from_json(&value.to_string())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(doc: &mut serde_json::Value, entry: &str) -> Result<(), Error> {
    let (key, raw) = entry.split_once('=').ok_or_else(|| {
        Error::Config(format!("override '{entry}' is not of the form key=value"))
    })?;
    let new: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override key '{key}': '{}' is not an object",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            if !map.contains_key(*part) {
                return Err(Error::Config(format!("override key '{key}' not found in config")));
            }
            map.insert(part.to_string(), new);
            return Ok(());
        }
        cursor = map.get_mut(*part).ok_or_else(|| {
            Error::Config(format!("override key '{key}' not found in config"))
        })?;
        // stepping into a disabled optional section: start from its defaults
        if cursor.is_null() {
            *cursor = serde_json::Value::Object(serde_json::Map::new());
        }
    }
    unreachable!("split('.') yields at least one part")
}

/// All persisted run records under the artifact root, in stable order.
fn collect_records(root: &std::path::Path) -> Result<Vec<RunRecord>, Error> {
    let runs = root.join("runs");
    if !runs.is_dir() {
        return Err(Error::MissingArtifact(format!(
            "no run records under {}",
            runs.display()
        )));
    }
    let mut names: Vec<String> = fs::read_dir(&runs)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".json") && !n.starts_with('.'))
        .map(|n| n.trim_end_matches(".json").to_string())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no run records under {}",
            runs.display()
        )));
    }
    let mut records = Vec::with_capacity(names.len());
    for name in names {
        records.push(load_record(root, &name)?);
    }
    // order sweep points by their axis value so tables and plots read left
    // to right
    records.sort_by(|a, b| {
        let key = |r: &RunRecord| r.axis.as_ref().and_then(|p| p.value.as_f64());
        key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(records)
}
