//! Declarative experiment configuration.
//!
//! A single JSON document describes every stage of a run. Omitted fields are
//! materialized to explicit defaults on load, and the content fingerprint is
//! taken over the fully materialized document, so a default changing across
//! versions cannot silently alias two different experiments.

use crate::datasets::{DatasetRole, DatasetSpec, MappingStrategy};
use crate::defense::{PrivacyConfig, StripConfig, TsneConfig};
use crate::distiller::DistillConfig;
use crate::error::{Error, Result};
use crate::hijack::QueryMode;
use crate::models::{ArchId, OptimizerKind, TrainCfg, UnetConfig};
use crate::transporter::LossWeights;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MappingCfg {
    pub strategy: MappingStrategy,
    pub seed: u64,
}

impl Default for MappingCfg {
    fn default() -> Self {
        Self { strategy: MappingStrategy::Identity, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExtractorCfg {
    pub arch: ArchId,
    pub warmup: TrainCfg,
}

impl Default for ExtractorCfg {
    fn default() -> Self {
        Self {
            arch: ArchId::ToyCnn,
            warmup: TrainCfg { epochs: 10, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TransporterStageCfg {
    pub unet: UnetConfig,
    pub weights: LossWeights,
    pub train: TrainCfg,
    pub extractor: ExtractorCfg,
}

impl Default for TransporterStageCfg {
    fn default() -> Self {
        Self {
            unet: UnetConfig::default(),
            weights: LossWeights::default(),
            // small batches: more optimizer steps within a fixed epoch budget
            train: TrainCfg { epochs: 30, batch_size: 16, learning_rate: 2e-3, ..Default::default() },
            extractor: ExtractorCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrajectoryCfg {
    /// Independent expert trajectories in the buffer.
    pub count: usize,
    pub train: TrainCfg,
    pub snapshot_interval: usize,
}

impl Default for TrajectoryCfg {
    fn default() -> Self {
        Self {
            count: 4,
            train: TrainCfg {
                epochs: 20,
                batch_size: 32,
                learning_rate: 0.1,
                optimizer: OptimizerKind::Sgd,
            },
            snapshot_interval: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DistillStageCfg {
    pub params: DistillConfig,
    pub surrogate_arch: ArchId,
    pub surrogate_warmup: TrainCfg,
    /// Training of the realism/soft-label observer on the original task.
    pub observer_train: TrainCfg,
    pub trajectories: TrajectoryCfg,
}

impl Default for DistillStageCfg {
    fn default() -> Self {
        Self {
            params: DistillConfig { ipc: 10, epochs: 100, ..Default::default() },
            surrogate_arch: ArchId::ToyCnn,
            surrogate_warmup: TrainCfg { epochs: 10, ..Default::default() },
            observer_train: TrainCfg::default(),
            trajectories: TrajectoryCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VictimCfg {
    pub arch: ArchId,
    pub finetune: TrainCfg,
    pub query_mode: QueryMode,
}

impl Default for VictimCfg {
    fn default() -> Self {
        Self {
            arch: ArchId::ToyCnn,
            // distilled sets are tiny, so an epoch is only a step or two;
            // give the fine-tune enough of them to converge
            finetune: TrainCfg { epochs: 100, ..Default::default() },
            query_mode: QueryMode::Transported,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StripStageCfg {
    pub probe: StripConfig,
    /// Queries drawn from each side (synthetic and benign).
    pub sample_count: usize,
}

impl Default for StripStageCfg {
    fn default() -> Self {
        Self { probe: StripConfig::default(), sample_count: 40 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DpStageCfg {
    pub privacy: PrivacyConfig,
    pub train: TrainCfg,
}

impl Default for DpStageCfg {
    fn default() -> Self {
        Self {
            privacy: PrivacyConfig::default(),
            train: TrainCfg { epochs: 5, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ProjectionStageCfg {
    pub tsne: TsneConfig,
    /// Samples per group (synthetic / real) fed to the projection.
    pub per_group: usize,
}

impl Default for ProjectionStageCfg {
    fn default() -> Self {
        Self { tsne: TsneConfig::default(), per_group: 60 }
    }
}

/// Defense probes; each is off unless configured.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DefenseCfg {
    pub strip: Option<StripStageCfg>,
    pub privacy: Option<DpStageCfg>,
    pub projection: Option<ProjectionStageCfg>,
}

impl DefenseCfg {
    pub fn any_enabled(&self) -> bool {
        self.strip.is_some() || self.privacy.is_some() || self.projection.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Ipc,
    KeyPatches,
    Dilution,
    DatasetPair,
    Extractor,
    VictimArch,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Ipc => "ipc",
            SweepAxis::KeyPatches => "key_patches",
            SweepAxis::Dilution => "dilution",
            SweepAxis::DatasetPair => "dataset_pair",
            SweepAxis::Extractor => "extractor",
            SweepAxis::VictimArch => "victim_arch",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub original: DatasetSpec,
    pub hijacking: DatasetSpec,
    pub mapping: MappingCfg,
    pub transporter: TransporterStageCfg,
    pub distill: DistillStageCfg,
    pub victim: VictimCfg,
    /// Fraction of the victim's training stream drawn from real data.
    pub dilution_ratio: f64,
    pub defense: DefenseCfg,
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            original: DatasetSpec::synth_digits(
                "digits-original",
                DatasetRole::Original,
                &[0, 1, 2, 3],
                256,
                64,
                32,
                11,
            ),
            hijacking: DatasetSpec::synth_digits(
                "digits-hijacking",
                DatasetRole::Hijacking,
                &[4, 5, 6, 7],
                256,
                64,
                32,
                13,
            ),
            mapping: MappingCfg::default(),
            transporter: TransporterStageCfg::default(),
            distill: DistillStageCfg::default(),
            victim: VictimCfg::default(),
            // the victim mixes the published synthetic set with its own real
            // data in equal parts; the clean control uses the same mix
            dilution_ratio: 0.5,
            defense: DefenseCfg::default(),
            sweep: None,
        }
    }
}

fn is_square(n: usize) -> bool {
    let r = (n as f64).sqrt().round() as usize;
    r * r == n
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported, expected {SCHEMA_VERSION}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.original.validate()?;
        self.hijacking.validate()?;
        if self.original.role != DatasetRole::Original {
            return Err(Error::Config("'original' dataset has the wrong role".into()));
        }
        if self.hijacking.role != DatasetRole::Hijacking {
            return Err(Error::Config("'hijacking' dataset has the wrong role".into()));
        }
        if self.original.resolution != self.hijacking.resolution {
            return Err(Error::Config("dataset resolutions must match".into()));
        }
        self.transporter.weights.validate()?;
        if !is_square(self.distill.params.key_patches) || self.distill.params.key_patches == 0 {
            return Err(Error::Config(format!(
                "key_patches {} must be a positive perfect square",
                self.distill.params.key_patches
            )));
        }
        if !(0.0..=1.0).contains(&self.dilution_ratio) {
            return Err(Error::Config(format!(
                "dilution ratio {} outside [0,1]",
                self.dilution_ratio
            )));
        }
        if let Some(dp) = &self.defense.privacy {
            dp.privacy.validate()?;
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::Config("sweep requested with no axis values".into()));
            }
        }
        Ok(())
    }

    /// Content hash of the fully materialized config, hex-encoded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        super::store::hash_bytes(json.as_bytes())
    }

    /// A copy of this config with one sweep-axis value applied and the sweep
    /// spec cleared.
    pub fn with_axis_value(&self, axis: SweepAxis, value: &serde_json::Value) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.sweep = None;
        let bad = |what: &str| {
            Error::Config(format!("sweep value {value} is not a valid {what}"))
        };
        match axis {
            SweepAxis::Ipc => {
                cfg.distill.params.ipc =
                    value.as_u64().ok_or_else(|| bad("ipc count"))? as usize;
            }
            SweepAxis::KeyPatches => {
                cfg.distill.params.key_patches =
                    value.as_u64().ok_or_else(|| bad("key-patch count"))? as usize;
            }
            SweepAxis::Dilution => {
                cfg.dilution_ratio = value.as_f64().ok_or_else(|| bad("dilution ratio"))?;
            }
            SweepAxis::DatasetPair => {
                let (original, hijacking): (DatasetSpec, DatasetSpec) =
                    serde_json::from_value(value.clone())
                        .map_err(|_| bad("dataset spec pair"))?;
                cfg.original = original;
                cfg.hijacking = hijacking;
            }
            SweepAxis::Extractor => {
                cfg.transporter.extractor.arch = value
                    .as_str()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("architecture id"))?;
            }
            SweepAxis::VictimArch => {
                cfg.victim.arch = value
                    .as_str()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("architecture id"))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
