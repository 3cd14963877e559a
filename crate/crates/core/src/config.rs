//! The single structured-text configuration behind every subcommand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::thresholds::Strategy;
use crate::training::{Grid, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides the data and training seeds.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub grid: Grid,
    /// Whether the file set both orthogonality weights explicitly.
    #[serde(skip)]
    pub loss_weights_given: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synth: DatasetConfig,
    /// Attribute whose positive-rate gap is adjusted by subsampling.
    pub disparity_attribute: Option<String>,
    pub target_disparity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `intersectional` or an attribute name.
    pub grouping: String,
    pub strategy: Strategy,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            grouping: "intersectional".into(),
            strategy: Strategy::MinGap,
        }
    }
}

impl RunConfig {
    /// Parses TOML; errors carry the offending line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    let col = s.start - text[..s.start].rfind('\n').map_or(0, |i| i + 1) + 1;
                    format!("line {line}, column {col}: ")
                })
                .unwrap_or_default();
            Error::Config(format!("{location}{}", e.message()))
        })?;
        cfg.loss_weights_given = toml::from_str::<toml::Table>(text)
            .ok()
            .and_then(|t| t.get("train")?.get("weights")?.as_table().cloned())
            .is_some_and(|w| w.contains_key("lambda_c") && w.contains_key("lambda_r"));
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.data.synth.seed = seed;
        self.train.seed = seed;
    }

    /// Training has no silent default for the orthogonality weights.
    pub fn require_loss_weights(&self) -> Result<()> {
        if self.loss_weights_given {
            Ok(())
        } else {
            Err(Error::Config(
                "train.weights.lambda_c and train.weights.lambda_r must be set in the config".into(),
            ))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        if let Some(t) = self.data.target_disparity {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("target_disparity {t} outside [0, 1]")));
            }
            if self.data.disparity_attribute.is_none() {
                return Err(Error::Config(
                    "target_disparity needs disparity_attribute".into(),
                ));
            }
        }
        if let Some(a) = &self.data.disparity_attribute {
            if !self.data.synth.attribute_names.contains(a) {
                return Err(Error::Config(format!("disparity_attribute {a:?} is not configured")));
            }
        }
        self.train.validate(self.data.synth.num_attributes())
    }
}
