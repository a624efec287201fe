//! Run configuration: JSON file, named ablations and dotted-path overrides.

use crackscreen::arch::ArchConfig;
use crackscreen::augment::{DegradationSpec, Normalization};
use crackscreen::data::{Fractions, SyntheticSpec};
use crackscreen::loss::{LossConfig, LossKind, Sampler};
use crackscreen::train::TrainConfig;
use crackscreen::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "CRACKSCREEN_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root with `CD/` and `UD/` class directories.
    pub root: Option<PathBuf>,
    /// Split manifest to reuse instead of drawing a new split.
    pub split: Option<PathBuf>,
    pub fractions: Fractions,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            split: None,
            fractions: Fractions::default(),
            split_seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub normalization: Normalization,
    pub synth: SyntheticSpec,
    pub output_dir: PathBuf,
}

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::preset("tiny-cbam").expect("built-in preset"),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            normalization: Normalization::default(),
            synth: SyntheticSpec::default(),
            output_dir: default_output_dir(),
        }
    }
}

/// The seven training configurations of the ablation study.
pub const ABLATIONS: [&str; 7] = ["baseline-ce", "fl", "ra", "weighted-ce", "weighted-sampler", "ra-fl", "ra-fl-cbam"];

/// Rewrites loss, sampler, augmentation and attention for a named ablation.
/// Everything else in `cfg` is kept.
pub fn apply_ablation(cfg: &mut RunConfig, name: &str) -> Result<()> {
    let (loss, sampler, augment, cbam) = match name {
        "baseline-ce" => (LossKind::Ce, Sampler::Uniform, false, false),
        "fl" => (LossKind::Focal, Sampler::Uniform, false, false),
        "ra" => (LossKind::Ce, Sampler::Uniform, true, false),
        "weighted-ce" => (LossKind::WeightedCe, Sampler::Uniform, false, false),
        "weighted-sampler" => (LossKind::Ce, Sampler::Weighted, false, false),
        "ra-fl" => (LossKind::Focal, Sampler::Uniform, true, false),
        "ra-fl-cbam" => (LossKind::Focal, Sampler::Uniform, true, true),
        other => {
            return Err(Error::config(
                "ablation",
                format!("unknown ablation `{other}`; expected one of {}", ABLATIONS.join(", ")),
            ))
        }
    };
    cfg.train.loss = LossConfig { kind: loss, ..cfg.train.loss.clone() };
    cfg.train.sampler = sampler;
    cfg.train.augmentation = augment.then(|| cfg.train.augmentation.clone().unwrap_or_default());
    cfg.arch = cfg.arch.clone().with_cbam(cbam);
    Ok(())
}

/// Sets the field at dotted `path` from `raw`, which is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(cfg: &RunConfig, path: &str, raw: &str) -> Result<RunConfig> {
    let mut root = serde_json::to_value(cfg)?;
    let mut slot = &mut root;
    for key in path.split('.') {
        slot = match slot {
            Value::Object(map) => map
                .get_mut(key)
                .ok_or_else(|| Error::config(path, format!("unknown field `{key}`")))?,
            Value::Array(items) => {
                let i: usize = key.parse().map_err(|_| Error::config(path, format!("`{key}` is not an index")))?;
                let n = items.len();
                items.get_mut(i).ok_or_else(|| Error::config(path, format!("index {i} out of range for {n} items")))?
            }
            _ => return Err(Error::config(path, format!("cannot descend into `{key}`"))),
        };
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    serde_json::from_value(root).map_err(|e| Error::config(path, e.to_string()))
}

/// Parses a `path=value` override.
pub fn split_override(arg: &str) -> Result<(&str, &str)> {
    arg.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::config("--set", format!("`{arg}` is not of the form path=value")))
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

/// Layers, in order: defaults or `file`, `preset`, `ablation`, `overrides`.
pub fn resolve(file: Option<&Path>, preset: Option<&str>, ablation: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = preset {
        cfg.arch = ArchConfig::preset(p).map_err(|e| Error::config("arch", e.to_string()))?;
    }
    if let Some(a) = ablation {
        apply_ablation(&mut cfg, a)?;
    }
    for o in overrides {
        let (path, raw) = split_override(o)?;
        cfg = apply_override(&cfg, path, raw)?;
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate().map_err(|e| Error::config("arch", e.to_string()))?;
        self.train.validate()?;
        if let Some(spec) = &self.train.augmentation {
            spec.validate()?;
        }
        if self.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("normalization.std", "must be positive"));
        }
        Ok(())
    }

    /// The dataset root, which must exist.
    pub fn data_root(&self) -> Result<&Path> {
        let root = self.data.root.as_deref().ok_or_else(|| Error::config("data.root", "no dataset given"))?;
        if !root.is_dir() {
            return Err(Error::config("data.root", format!("{} is not a directory", root.display())));
        }
        Ok(root)
    }

    /// Degradation table for previews: the configured one, else the default.
    pub fn degradations(&self) -> DegradationSpec {
        self.train.augmentation.clone().unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
