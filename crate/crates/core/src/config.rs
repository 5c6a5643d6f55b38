//! Run configuration file: TOML with `[run]`, `[phantom]`, `[model]`,
//! `[train]` and `[ablate]` tables. Every table is optional and unknown keys
//! are rejected.
//!
//! ```toml
//! [run]
//! seed = 7
//! subjects = 24
//! spacing_mm = 1.8
//!
//! [model]
//! variant = "resrnn-circle"
//!
//! [train]
//! max_iters = 7500
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ResRnnConfig, Variant};
use crate::phantom::PhantomRanges;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Dataset seed for `generate` and fold-assignment seed for `ablate`.
    pub seed: u64,
    pub subjects: usize,
    /// Worker threads; 0 means one per available processor.
    pub workers: usize,
    pub spacing_mm: Option<f64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            subjects: 24,
            workers: 0,
            spacing_mm: None,
            data: None,
            out: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub variants: Vec<Variant>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            variants: Variant::ABLATION.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub phantom: PhantomRanges,
    pub model: ResRnnConfig,
    pub train: TrainConfig,
    pub ablate: AblateSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every section for internal consistency.
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.flat_features()?;
        self.train.validate()?;
        if self.ablate.variants.is_empty() {
            return Err(Error::Config("ablate.variants is empty".into()));
        }
        if let Some(s) = self.run.spacing_mm {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config("spacing_mm must be positive".into()));
            }
        }
        Ok(())
    }
}
