//! Axis sweeps over a base experiment configuration.

use super::config::{ExperimentConfig, SweepAxis};
use super::pipeline::{run_pipeline_tagged, AxisPoint, PipelineStage, RunRecord, RunStatus};
use crate::error::Result;
use crate::scalar::Scalar;
use std::path::Path;

/// Run the pipeline once per axis value. Points share the stage cache, so
/// stages unaffected by the axis (for example everything upstream of the
/// victim on a dilution sweep) are computed once. A failing point is
/// recorded as failed and the remaining points continue.
pub fn run_sweep<F: Scalar>(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[serde_json::Value],
    root: &Path,
) -> Result<Vec<RunRecord>> {
    if values.is_empty() {
        return Err(crate::error::Error::Config("sweep needs at least one axis value".into()));
    }
    let mut records = Vec::with_capacity(values.len());
    for value in values {
        let point = AxisPoint { axis, value: value.clone() };
        let record = match base.with_axis_value(axis, value) {
            Ok(cfg) => run_pipeline_tagged::<F>(&cfg, root, Some(point), PipelineStage::Defense)?,
            Err(e) => {
                log::error!("sweep point {value} rejected: {e}");
                RunRecord {
                    fingerprint: String::new(),
                    status: RunStatus::Failed {
                        stage: "config".into(),
                        message: e.to_string(),
                    },
                    stages: Vec::new(),
                    report: None,
                    defense: None,
                    axis: Some(point),
                }
            }
        };
        records.push(record);
    }
    Ok(records)
}
