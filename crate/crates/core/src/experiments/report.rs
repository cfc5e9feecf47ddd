//! Report bundle emission: JSON table, CSV, markdown summary, and static
//! metric plots for a set of run records sharing one sweep axis.

use super::pipeline::{RunRecord, RunStatus};
use crate::error::{Error, Result};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub axis_value: serde_json::Value,
    pub utility: Option<f64>,
    pub asr: Option<f64>,
    pub status: String,
    pub fingerprint: String,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportTable {
    pub axis: String,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub json: PathBuf,
    pub markdown: PathBuf,
    pub tables: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

fn status_string(s: &RunStatus) -> String {
    match s {
        RunStatus::Complete => "complete".into(),
        RunStatus::Failed { stage, message } => format!("failed:{stage}:{message}"),
    }
}

/// Build the in-memory table, enforcing a single shared axis.
pub fn report_table(records: &[RunRecord]) -> Result<ReportTable> {
    if records.is_empty() {
        return Err(Error::Config("report needs at least one record".into()));
    }
    let axes: Vec<Option<&str>> =
        records.iter().map(|r| r.axis.as_ref().map(|a| a.axis.as_str())).collect();
    let first = axes[0];
    if axes.iter().any(|a| *a != first) {
        return Err(Error::Config(
            "records mix different sweep axes; report one axis at a time".into(),
        ));
    }
    let axis = first.unwrap_or("run").to_string();
    let rows = records
        .iter()
        .enumerate()
        .map(|(i, r)| ReportRow {
            axis_value: r
                .axis
                .as_ref()
                .map(|a| a.value.clone())
                .unwrap_or_else(|| serde_json::json!(i)),
            utility: r.report.as_ref().map(|rep| rep.utility),
            asr: r.report.as_ref().map(|rep| rep.asr),
            status: status_string(&r.status),
            fingerprint: r.fingerprint.clone(),
            wall_clock_secs: r.stages.iter().map(|s| s.wall_clock_secs).sum(),
        })
        .collect();
    Ok(ReportTable { axis, rows })
}

fn ensure_fonts() -> bool {
    static REGISTERED: OnceLock<bool> = OnceLock::new();
    *REGISTERED.get_or_init(|| {
        const CANDIDATES: &[&str] = &[
            "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
            "/usr/share/fonts/TTF/DejaVuSans.ttf",
            "/usr/share/fonts/dejavu/DejaVuSans.ttf",
        ];
        for path in CANDIDATES {
            if let Ok(bytes) = fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked).is_ok()
                {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; metric plots will be skipped");
        false
    })
}

fn plot_metrics(table: &ReportTable, path: &Path) -> Result<bool> {
    if !ensure_fonts() {
        return Ok(false);
    }
    let points: Vec<(f64, f64, f64)> = table
        .rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| match (r.utility, r.asr) {
            (Some(u), Some(a)) => Some((r.axis_value.as_f64().unwrap_or(i as f64), u, a)),
            _ => None,
        })
        .collect();
    if points.is_empty() {
        return Ok(false);
    }
    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((x_max - x_min) * 0.05).max(0.5);
    let root = BitMapBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| Error::Artifact(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("utility and ASR vs {}", table.axis), ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x_min - pad..x_max + pad, 0.0..1.05)
        .map_err(|e| Error::Artifact(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(table.axis.clone())
        .y_desc("fraction")
        .draw()
        .map_err(|e| Error::Artifact(e.to_string()))?;
    let series = [
        ("utility", &BLUE as &RGBColor, points.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>()),
        ("asr", &RED, points.iter().map(|p| (p.0, p.2)).collect::<Vec<_>>()),
    ];
    for (label, color, pts) in series {
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color))
            .map_err(|e| Error::Artifact(e.to_string()))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
        chart
            .draw_series(pts.iter().map(|&(x, y)| Circle::new((x, y), 3, color.filled())))
            .map_err(|e| Error::Artifact(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| Error::Artifact(e.to_string()))?;
    root.present().map_err(|e| Error::Artifact(e.to_string()))?;
    Ok(true)
}

fn csv_escape(v: &serde_json::Value) -> String {
    let s = match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

/// Write `report.json`, `report.md`, `tables/metrics.csv`, and
/// `plots/metrics.png` (when a usable font is available) under `out_dir`.
pub fn emit_report(records: &[RunRecord], out_dir: &Path) -> Result<ReportBundle> {
    let table = report_table(records)?;
    fs::create_dir_all(out_dir.join("tables"))?;
    fs::create_dir_all(out_dir.join("plots"))?;

    let json_path = out_dir.join("report.json");
    fs::write(&json_path, serde_json::to_vec_pretty(&table)?)?;

    let csv_path = out_dir.join("tables").join("metrics.csv");
    let mut csv = format!("{},utility,asr,status,fingerprint,wall_clock_secs\n", table.axis);
    for r in &table.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_escape(&r.axis_value),
            r.utility.map(|v| v.to_string()).unwrap_or_default(),
            r.asr.map(|v| v.to_string()).unwrap_or_default(),
            r.status,
            r.fingerprint,
            r.wall_clock_secs,
        ));
    }
    fs::write(&csv_path, csv)?;

    let plot_path = out_dir.join("plots").join("metrics.png");
    let plotted = plot_metrics(&table, &plot_path)?;

    let md_path = out_dir.join("report.md");
    let mut md = String::new();
    md.push_str(&format!("# Experiment report\n\naxis: `{}`\n\n", table.axis));
    md.push_str(&format!("| {} | utility | ASR | status |\n|---|---|---|---|\n", table.axis));
    for r in &table.rows {
        md.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.axis_value,
            r.utility.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.asr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.status,
        ));
    }
    if plotted {
        md.push_str("\n![metrics](plots/metrics.png)\n");
    }
    fs::write(&md_path, md)?;

    Ok(ReportBundle {
        dir: out_dir.to_path_buf(),
        json: json_path,
        markdown: md_path,
        tables: vec![csv_path],
        plots: if plotted { vec![plot_path] } else { vec![] },
    })
}
