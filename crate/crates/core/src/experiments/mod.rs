//! Experiment orchestration: declarative configs, the content-addressed
//! stage pipeline, axis sweeps, artifact persistence, and report emission.

pub mod config;
pub mod control;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod sweep;

pub use config::{
    DefenseCfg, DistillStageCfg, DpStageCfg, ExperimentConfig, ExtractorCfg, MappingCfg,
    ProjectionStageCfg, StripStageCfg, SweepAxis, SweepSpec, TrajectoryCfg, TransporterStageCfg,
    VictimCfg, SCHEMA_VERSION,
};
pub use pipeline::{
    load_record, run_pipeline, run_pipeline_until, AxisPoint, DefenseOutputs, DpSummary,
    PipelineStage, RunRecord, RunStatus, StageRecord,
};
pub use control::clean_control;
pub use report::{emit_report, report_table, ReportBundle, ReportRow, ReportTable};
pub use store::{
    artifact_root, hash_bytes, hash_dir, hash_json, load_artifact, save_artifact, Artifact,
    ArtifactKind, ARTIFACT_ROOT_ENV,
};
pub use sweep::run_sweep;
