//! TOML run configuration. Every section is optional and unknown keys are
//! rejected; command-line flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use banet_core::blocks::NetworkConfig;
use banet_core::train::{SynthConfig, TrainOptions};
use serde::{Deserialize, Serialize};

use crate::exit::Usage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Runs every loop on the calling thread.
    pub strict: bool,
    pub network: NetworkConfig,
    pub train: TrainOptions,
    /// Used when `paths.data` is unset.
    pub synth: SynthConfig,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory with `blur/` and `sharp/` subdirectories of same-named PNGs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Run directory: resolved config, training log and checkpoints.
    pub out: PathBuf,
    /// Checkpoint to continue from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("run"),
            resume: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strict: false,
            network: NetworkConfig::banet(),
            train: TrainOptions::default(),
            synth: SynthConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when there is none.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Usage(e.to_string()).into())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.paths.data.is_none() {
            self.synth.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
