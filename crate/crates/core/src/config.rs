//! Run configuration files with preset inheritance.
//!
//! A config file names a preset and overrides any subset of its fields:
//!
//! ```toml
//! preset = "desk_scale"
//! [train]
//! arch = "acgan"
//! max_steps = 400
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_pipeline::CropSpec;
use crate::error::{Error, Result};
use crate::trainer::{Arch, ModelConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    DeskScale,
    PaperScale,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::DeskScale => "desk_scale",
            Preset::PaperScale => "paper_scale",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk_scale" | "desk" => Ok(Preset::DeskScale),
            "paper_scale" | "paper" => Ok(Preset::PaperScale),
            _ => Err(Error::Config(format!("unknown preset {s:?} (valid: desk_scale, paper_scale)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<[usize; 3]>,
    /// Explicit crop start; centered when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_start: Option<[usize; 3]>,
    pub patch: [usize; 3],
    pub folds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_override: Option<PathBuf>,
    /// Participant-fold shuffling seed.
    pub fold_seed: u64,
    /// Keep preprocessed volumes in memory between samples.
    pub cache: bool,
}

impl DataConfig {
    pub fn crop_spec(&self) -> CropSpec {
        CropSpec {
            shape: self.crop,
            start: self.crop_start,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics_csv: PathBuf,
    pub crossval_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::DeskScale => RunConfig {
                preset: p,
                data: DataConfig {
                    manifest: None,
                    crop: Some([32, 32, 32]),
                    crop_start: None,
                    patch: [24; 3],
                    folds: 5,
                    fold_override: None,
                    fold_seed: 0,
                    cache: true,
                },
                model: ModelConfig::desk_scale(),
                train: TrainConfig::desk_scale(Arch::GtGan),
                eval: EvalConfig {
                    metrics_csv: "metrics.csv".into(),
                    crossval_dir: "crossval".into(),
                },
            },
            Preset::PaperScale => RunConfig {
                preset: p,
                data: DataConfig {
                    manifest: None,
                    crop: Some([150, 190, 150]),
                    crop_start: None,
                    patch: [128; 3],
                    folds: 5,
                    fold_override: None,
                    fold_seed: 0,
                    cache: true,
                },
                model: ModelConfig::paper_scale(),
                train: TrainConfig::paper_scale(Arch::GtGan),
                eval: EvalConfig {
                    metrics_csv: "metrics.csv".into(),
                    crossval_dir: "crossval".into(),
                },
            },
        }
    }

    /// Parses a config file, filling unspecified fields from its preset (or
    /// `fallback` when the file names none).
    pub fn from_toml(text: &str, fallback: Preset) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(overlay, fallback)
    }

    /// Learning rates default to the arch's own unless the overlay sets them.
    pub fn from_table(overlay: toml::Table, fallback: Preset) -> Result<Self> {
        let preset = match overlay.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => fallback,
        };
        let mut defaults = RunConfig::preset(preset);
        if let Some(toml::Value::String(a)) = overlay.get("train").and_then(|t| t.get("arch")) {
            let arch: Arch = a.parse()?;
            defaults.train.lr_g = arch.default_lr();
            defaults.train.lr_d = arch.default_lr();
        }
        let mut base = toml::Table::try_from(defaults).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overlay);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` into a table without resolving it.
    pub fn read_table(path: &Path) -> Result<toml::Table> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn load(path: &Path, fallback: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, fallback).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.generator.validate()?;
        let p = self.model.generator.patch_side;
        if self.data.patch != [p; 3] {
            return Err(Error::Config(format!(
                "data.patch {:?} must equal the generator patch side {p}",
                self.data.patch
            )));
        }
        if self.model.discriminator.patch_side != p {
            return Err(Error::Config("discriminator and generator patch sides differ".into()));
        }
        if let Some(c) = self.data.crop {
            if (0..3).any(|a| c[a] < p) {
                return Err(Error::Config(format!("crop {:?} is smaller than the patch", c)));
            }
        }
        if self.data.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.data.folds)));
        }
        Ok(())
    }
}

/// Recursive table merge; scalars and arrays in `over` replace `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
