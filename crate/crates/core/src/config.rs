//! Experiment description read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{apply_standardization_policy, generate_synthetic, Dataset, StandardizationReport, SyntheticParams};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::saliency::SaliencyConfig;
use crate::training::TrainConfig;

/// Either a native dataset directory or synthetic generator settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub saliency: SaliencyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/baseline"),
            data: DataSource {
                path: None,
                synthetic: Some(SyntheticParams::default()),
            },
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            saliency: SaliencyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(p) = &cfg.data.path {
            cfg.data.path = Some(base.join(p));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config("data needs exactly one of `path` or `synthetic`".into()))
            }
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// Loads or generates the raw data and applies split-specific
    /// standardization.
    pub fn load_dataset(&self) -> Result<(Dataset, StandardizationReport)> {
        let mut ds = match (&self.data.path, &self.data.synthetic) {
            (Some(p), None) => Dataset::load(p)?,
            (None, Some(s)) => generate_synthetic(s)?,
            _ => return Err(Error::Config("data needs exactly one of `path` or `synthetic`".into())),
        };
        if ds.channels != self.model.in_channels || ds.times != self.model.n_times {
            return Err(Error::Config(format!(
                "data windows are {}×{} but the model expects {}×{}",
                ds.channels, ds.times, self.model.in_channels, self.model.n_times
            )));
        }
        let report = apply_standardization_policy(&mut ds)?;
        Ok((ds, report))
    }
}
