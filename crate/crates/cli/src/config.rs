//! Run configuration: one TOML file holding every module config.
//!
//! A file names a preset in `[preset]`; every key it sets is merged over that
//! preset's defaults, and the result must deserialize with no unknown keys.

use std::fs;
use std::path::Path;

use mtsgait::backbone::{LayerConfig, ModelConfig, Preset};
use mtsgait::data::Protocol;
use mtsgait::head::HeadConfig;
use mtsgait::loss::LossConfig;
use mtsgait::mts::{Boundary, BranchEval, Direction, MtsConfig, Proportion};
use mtsgait::sampling::{BatchSpec, SamplerConfig, Strategy};
use mtsgait::trainer::{TrainConfig, TrainPreset};
use mtsgait::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::Value;

/// Name of the effective config written next to a trained checkpoint.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPreset {
    Desk,
    Gait3d,
    Grew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSection {
    pub name: RunPreset,
    /// Seeds weight init and every training draw.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub input_hw: [usize; 2],
    pub leaky_slope: f64,
    pub branch_eval: BranchEval,
    /// Layer plan. Temporal switching is configured in `[mts]`, not per layer.
    pub layers: Vec<LayerConfig>,
    pub head: HeadConfig,
}

/// Temporal switch settings shared by every layer except the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtsSection {
    pub enabled: bool,
    pub hops: Vec<usize>,
    pub direction: Direction,
    pub proportion: Proportion,
    pub boundary: Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: PresetSection,
    pub model: ModelSection,
    pub mts: MtsSection,
    pub sampler: SamplerConfig,
    pub batch: BatchSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataSection,
}

impl RunConfig {
    pub fn preset(name: RunPreset) -> Self {
        let (model, train, batch, frames, protocol) = match name {
            RunPreset::Desk => (Preset::Tiny, TrainPreset::Desk, BatchSpec { p: 4, k: 4 }, 8, Protocol::HeldOut { per_subject: 1 }),
            RunPreset::Gait3d => (
                Preset::Gait3d,
                TrainPreset::Gait3d,
                BatchSpec::default(),
                30,
                Protocol::Gait3d { test_subjects: 1000 },
            ),
            RunPreset::Grew => (
                Preset::Grew,
                TrainPreset::Grew,
                BatchSpec::default(),
                30,
                Protocol::Grew { test_subjects: 6000 },
            ),
        };
        let m = ModelConfig::preset(model, None);
        let mts = MtsConfig::default();
        RunConfig {
            preset: PresetSection { name, seed: 0 },
            model: ModelSection {
                input_hw: m.input_hw,
                leaky_slope: m.leaky_slope,
                branch_eval: m.branch_eval,
                layers: m.layers,
                head: m.head,
            },
            mts: MtsSection {
                enabled: true,
                hops: mts.hops,
                direction: mts.direction,
                proportion: mts.proportion,
                boundary: mts.boundary,
            },
            sampler: SamplerConfig {
                strategy: Strategy::Noncyclic,
                frames,
            },
            batch,
            loss: LossConfig::default(),
            train: TrainConfig::preset(train),
            data: DataSection { protocol },
        }
    }

    /// Parses a config text: preset defaults, then the file's keys on top.
    pub fn parse(text: &str) -> Result<Self> {
        let user: Value = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        let name = match user.get("preset").and_then(|p| p.get("name")) {
            None => RunPreset::Desk,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|_| Error::Config(format!("unknown preset {v} (desk | gait3d | grew)")))?,
        };
        let mut merged = Value::try_from(RunConfig::preset(name)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        if let Some(i) = cfg.model.layers.iter().position(|l| l.mts.is_some()) {
            return Err(Error::Config(format!(
                "model.layers[{i}].mts is not accepted here; temporal switching is set in [mts]"
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The effective config as TOML; parsing it yields `self` again.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn mts_config(&self) -> Option<MtsConfig> {
        self.mts.enabled.then(|| MtsConfig {
            hops: self.mts.hops.clone(),
            direction: self.mts.direction,
            proportion: self.mts.proportion,
            boundary: self.mts.boundary,
        })
    }

    /// Backbone and head, with `[mts]` applied to every layer after the first.
    pub fn model_config(&self) -> ModelConfig {
        let preset = match self.preset.name {
            RunPreset::Desk => Preset::Tiny,
            RunPreset::Gait3d => Preset::Gait3d,
            RunPreset::Grew => Preset::Grew,
        };
        let mts = self.mts_config();
        let mut layers = self.model.layers.clone();
        for l in layers.iter_mut().skip(1) {
            l.mts = mts.clone();
        }
        ModelConfig {
            preset,
            input_hw: self.model.input_hw,
            layers,
            leaky_slope: self.model.leaky_slope,
            branch_eval: self.model.branch_eval,
            head: self.model.head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.sampler.validate()?;
        self.batch.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}

/// Tables merge key by key; anything else in `over` replaces `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
