use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cdcl_core::data::{benchmark, generate, Dataset, DatasetSpec, DEFAULT_MIN_VALID_FRACTION};
use cdcl_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::failure::ConfigError;

pub const CONFIG_VERSION: u32 = 1;

/// Parses JSON with the path of the offending field and its line/column in
/// the error message.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ConfigError(format!(
            "{}:{}:{}: at `{path}`: {inner}",
            origin.display(),
            inner.line(),
            inner.column()
        ))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_json(&text, path)?)
}

fn check_version(version: u32) -> Result<(), ConfigError> {
    if version != CONFIG_VERSION {
        return Err(ConfigError(format!("unsupported config version {version}, expected {CONFIG_VERSION}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ShiftedTriptych,
}

/// Input of `gen-data`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub version: u32,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub seed: u64,
    /// Also emit the held-out dataset of the preset.
    #[serde(default)]
    pub held_out: bool,
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
}

impl GenSpec {
    pub fn specs(&self) -> anyhow::Result<Vec<DatasetSpec>> {
        check_version(self.version)?;
        let mut out = self.datasets.clone();
        match self.preset {
            Some(Preset::ShiftedTriptych) => {
                for (train, val) in benchmark::triptych_specs(self.seed) {
                    out.push(train);
                    out.push(val);
                }
                if self.held_out {
                    out.push(benchmark::held_out_spec(self.seed, benchmark::VAL_SIZE));
                }
            }
            None if out.is_empty() => return Err(ConfigError("no preset and no datasets".into()).into()),
            None => {}
        }
        Ok(out)
    }
}

/// A train/val pair given inline or as generated directories (relative to
/// the config file).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSource {
    #[serde(default)]
    pub train_spec: Option<DatasetSpec>,
    #[serde(default)]
    pub val_spec: Option<DatasetSpec>,
    #[serde(default)]
    pub train_dir: Option<PathBuf>,
    #[serde(default)]
    pub val_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub splits: Vec<SplitSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Single,
    Finetune,
    LabelRemap,
    DaTwoStage,
    Cdcl,
}

/// Input of `train` and `ablate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub strategy: Strategy,
    pub datasets: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset index trained first (finetune, da_two_stage) or remapped
    /// (label_remap).
    #[serde(default)]
    pub source: Option<usize>,
    /// Dataset index of the final model (single, finetune, label_remap,
    /// da_two_stage).
    #[serde(default)]
    pub target: Option<usize>,
    /// `[source class, target class or null]` pairs for label_remap.
    #[serde(default)]
    pub label_map: Vec<(String, Option<String>)>,
    #[serde(default = "default_min_valid")]
    pub min_valid_fraction: f64,
    #[serde(default)]
    pub freeze_conv: bool,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_min_valid() -> f64 {
    DEFAULT_MIN_VALID_FRACTION
}

fn default_log_every() -> usize {
    50
}

/// Loaded train and validation sets.
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<(Self, PathBuf)> {
        let cfg: Self = read_json(path)?;
        check_version(cfg.version)?;
        cfg.check_roles()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn splits(&self, base: &Path) -> anyhow::Result<Vec<Split>> {
        let mut out = Vec::new();
        if let Some(Preset::ShiftedTriptych) = self.datasets.preset {
            for (train, val) in benchmark::triptych_specs(self.datasets.seed) {
                out.push(Split { train: generate(&train)?, val: generate(&val)? });
            }
        }
        for (i, s) in self.datasets.splits.iter().enumerate() {
            let load = |spec: &Option<DatasetSpec>, dir: &Option<PathBuf>, what: &str| -> anyhow::Result<Dataset> {
                match (spec, dir) {
                    (Some(spec), None) => Ok(generate(spec)?),
                    (None, Some(dir)) => Ok(Dataset::read_from_dir(&base.join(dir))?),
                    _ => Err(ConfigError(format!("datasets.splits[{i}]: give exactly one of {what}_spec, {what}_dir")).into()),
                }
            };
            out.push(Split { train: load(&s.train_spec, &s.train_dir, "train")?, val: load(&s.val_spec, &s.val_dir, "val")? });
        }
        if out.is_empty() {
            return Err(ConfigError("datasets: no preset and no splits".into()).into());
        }
        Ok(out)
    }

    /// Number of datasets described, known before any is loaded.
    pub fn num_datasets(&self) -> usize {
        let preset = match self.datasets.preset {
            Some(Preset::ShiftedTriptych) => benchmark::triptych_specs(0).len(),
            None => 0,
        };
        preset + self.datasets.splits.len()
    }

    fn check_roles(&self) -> Result<(), ConfigError> {
        let n = self.num_datasets();
        if n == 0 {
            return Err(ConfigError("datasets: no preset and no splits".into()));
        }
        match self.strategy {
            Strategy::Cdcl => {}
            Strategy::Single => {
                self.index(self.target.or(Some(0)), "target", n)?;
            }
            _ => {
                self.index(self.source, "source", n)?;
                self.index(self.target, "target", n)?;
            }
        }
        Ok(())
    }

    pub fn index(&self, which: Option<usize>, name: &str, n: usize) -> Result<usize, ConfigError> {
        let i = which.ok_or_else(|| ConfigError(format!("strategy {:?} needs `{name}`", self.strategy)))?;
        if i >= n {
            return Err(ConfigError(format!("`{name}` = {i} but only {n} dataset(s) are configured")));
        }
        Ok(i)
    }
}
