//! Artifact persistence: typed save/load with content-hash verification,
//! plus the directory hashing used for stage-cache keys.

use crate::distiller::{DistilledOsmosisSet, ExpertTrajectory};
use crate::error::{Error, Result};
use crate::hijack::EvalReport;
use crate::nn::Param;
use crate::scalar::Scalar;
use crate::transporter::OsmosisSample;
use ndarray::{Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

/// Environment variable naming the artifact root directory.
pub const ARTIFACT_ROOT_ENV: &str = "DODKIT_ARTIFACT_ROOT";

/// Artifact root: the environment override or `./artifacts`.
pub fn artifact_root() -> PathBuf {
    std::env::var_os(ARTIFACT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_json(value: &serde_json::Value) -> String {
    hash_bytes(serde_json::to_string(value).expect("json serializes").as_bytes())
}

/// Content hash of a directory tree: relative paths and file bytes, walked
/// in sorted order. Bookkeeping files written after hashing are excluded.
pub fn hash_dir(dir: &Path) -> Result<String> {
    const EXCLUDED: &[&str] = &["stage.json", "artifact.json"];
    let mut hasher = Sha256::new();
    let mut stack = vec![dir.to_path_buf()];
    let mut files: Vec<PathBuf> = Vec::new();
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    for path in files {
        let rel = path.strip_prefix(dir).expect("child of dir");
        if rel.components().count() == 1
            && EXCLUDED.contains(&rel.to_string_lossy().as_ref())
        {
            continue;
        }
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(&path)?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    OsmosisSet,
    Trajectory,
    Dod,
    Checkpoint,
    Report,
}

impl ArtifactKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArtifactKind::OsmosisSet => "osmosis_set",
            ArtifactKind::Trajectory => "trajectory",
            ArtifactKind::Dod => "dod",
            ArtifactKind::Checkpoint => "checkpoint",
            ArtifactKind::Report => "report",
        }
    }
}

/// Any persistable artifact, tagged by kind.
#[derive(Debug, Clone)]
pub enum Artifact<F: Scalar> {
    OsmosisSet(Vec<OsmosisSample<F>>),
    Trajectory(ExpertTrajectory<F>),
    Dod(DistilledOsmosisSet<F>),
    /// Raw named tensors plus free-form model metadata.
    Checkpoint { config: serde_json::Value, params: Vec<(String, ArrayD<F>)> },
    Report(EvalReport),
}

impl<F: Scalar> Artifact<F> {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            Artifact::OsmosisSet(_) => ArtifactKind::OsmosisSet,
            Artifact::Trajectory(_) => ArtifactKind::Trajectory,
            Artifact::Dod(_) => ArtifactKind::Dod,
            Artifact::Checkpoint { .. } => ArtifactKind::Checkpoint,
            Artifact::Report(_) => ArtifactKind::Report,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactManifest {
    kind: ArtifactKind,
    schema_version: u32,
    content_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct OsmosisManifest {
    count: usize,
    resolution: usize,
    labels: Vec<(usize, usize)>,
    source_ids: Vec<(usize, usize)>,
}

fn save_osmosis_set<F: Scalar>(dir: &Path, samples: &[OsmosisSample<F>]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("refusing to persist an empty osmosis set".into()));
    }
    let resolution = samples[0].x_c.dim().1;
    let manifest = OsmosisManifest {
        count: samples.len(),
        resolution,
        labels: samples.iter().map(|s| (s.y_o, s.y_h)).collect(),
        source_ids: samples.iter().map(|s| s.source_ids).collect(),
    };
    fs::write(dir.join("osmosis.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let mut bytes = Vec::with_capacity(samples.len() * 3 * resolution * resolution * 4);
    for s in samples {
        for v in s.x_c.iter() {
            bytes.extend_from_slice(&v.to_f32_().to_le_bytes());
        }
    }
    fs::write(dir.join("images.f32"), bytes)?;
    Ok(())
}

fn load_osmosis_set<F: Scalar>(dir: &Path) -> Result<Vec<OsmosisSample<F>>> {
    let manifest_path = dir.join("osmosis.json");
    if !manifest_path.is_file() {
        return Err(Error::MissingArtifact(manifest_path.display().to_string()));
    }
    let m: OsmosisManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let bytes = fs::read(dir.join("images.f32"))?;
    let per = 3 * m.resolution * m.resolution;
    if bytes.len() != m.count * per * 4 {
        return Err(Error::Artifact(format!(
            "images.f32: {} bytes, expected {}",
            bytes.len(),
            m.count * per * 4
        )));
    }
    let values: Vec<F> = bytes
        .chunks_exact(4)
        .map(|c| F::from_f32_(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let all = Array4::from_shape_vec((m.count, 3, m.resolution, m.resolution), values)
        .map_err(|e| Error::Artifact(e.to_string()))?;
    Ok((0..m.count)
        .map(|i| OsmosisSample {
            x_c: all.index_axis(Axis(0), i).to_owned(),
            y_o: m.labels[i].0,
            y_h: m.labels[i].1,
            source_ids: m.source_ids[i],
        })
        .collect())
}

/// Persist an artifact under `dir` and seal it with a content-hash manifest.
pub fn save_artifact<F: Scalar>(dir: &Path, artifact: &Artifact<F>) -> Result<()> {
    fs::create_dir_all(dir)?;
    match artifact {
        Artifact::OsmosisSet(samples) => save_osmosis_set(dir, samples)?,
        Artifact::Trajectory(t) => t.save(dir)?,
        Artifact::Dod(d) => d.save(dir)?,
        Artifact::Checkpoint { config, params } => {
            let wrapped: Vec<(String, Param<F>)> =
                params.iter().map(|(n, v)| (n.clone(), Param::new(v.clone()))).collect();
            let named: Vec<(String, &Param<F>)> =
                wrapped.iter().map(|(n, p)| (n.clone(), p)).collect();
            crate::artifacts::save_checkpoint(dir, config, &named)?;
        }
        Artifact::Report(r) => {
            fs::write(dir.join("report.json"), r.to_json()?)?;
        }
    }
    let manifest = ArtifactManifest {
        kind: artifact.kind(),
        schema_version: 1,
        content_hash: hash_dir(dir)?,
    };
    fs::write(dir.join("artifact.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Load an artifact, verifying its kind and content hash first.
pub fn load_artifact<F: Scalar>(dir: &Path, kind: ArtifactKind) -> Result<Artifact<F>> {
    let manifest_path = dir.join("artifact.json");
    if !manifest_path.is_file() {
        return Err(Error::MissingArtifact(manifest_path.display().to_string()));
    }
    let m: ArtifactManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    if m.kind != kind {
        return Err(Error::Artifact(format!(
            "kind: expected {}, found {}",
            kind.as_str(),
            m.kind.as_str()
        )));
    }
    let actual = hash_dir(dir)?;
    if actual != m.content_hash {
        return Err(Error::HashMismatch {
            field: "content_hash".into(),
            expected: m.content_hash,
            got: actual,
        });
    }
    Ok(match kind {
        ArtifactKind::OsmosisSet => Artifact::OsmosisSet(load_osmosis_set(dir)?),
        ArtifactKind::Trajectory => Artifact::Trajectory(ExpertTrajectory::load(dir)?),
        ArtifactKind::Dod => Artifact::Dod(DistilledOsmosisSet::load(dir)?),
        ArtifactKind::Checkpoint => Artifact::Checkpoint {
            config: crate::artifacts::load_config(dir)?,
            params: crate::artifacts::load_all_params(dir)?,
        },
        ArtifactKind::Report => {
            let report: EvalReport = serde_json::from_slice(&fs::read(dir.join("report.json"))?)?;
            Artifact::Report(report)
        }
    })
}
