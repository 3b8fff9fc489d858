//! One TOML file describing a whole experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

fn d_out() -> PathBuf {
    PathBuf::from("runs")
}
fn d_alphas() -> Vec<f64> {
    vec![0.01, 0.1, 0.2, 0.3, 0.5, 1.0]
}
fn d_betas() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default = "d_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "d_betas")]
    pub betas: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            alphas: d_alphas(),
            betas: d_betas(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepGrid,
    /// Root directory for every stage's outputs.
    #[serde(default = "d_out")]
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            sweep: SweepGrid::default(),
            out: d_out(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e
                .span()
                .map(|s| 1 + text[..s.start].matches('\n').count())
                .unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "config is not UTF-8".into(),
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        for (name, grid) in [
            ("sweep.alphas", &self.sweep.alphas),
            ("sweep.betas", &self.sweep.betas),
        ] {
            if grid.is_empty() || grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::config(
                    name,
                    "must be a non-empty list of positive numbers",
                ));
            }
        }
        Ok(())
    }

    /// The fully resolved config, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}
