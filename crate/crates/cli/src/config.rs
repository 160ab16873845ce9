use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bke_core::bke::{BkeConfig, Propagation};
use bke_core::models::ModelSpecs;
use bke_core::ssl::SslConfig;
use serde::{Deserialize, Serialize};

/// Everything a command can be configured with. Precedence is
/// flag > config file > default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ssl: SslConfig,
    pub bke: BkeConfig,
    /// Share of each class's training images used for fine-tuning.
    pub fraction: f64,
    /// Defaults to the desk-scale architecture for the dataset's image side.
    pub model: Option<ModelSpecs>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            ssl: SslConfig::default(),
            bke: BkeConfig::default(),
            fraction: 1.0,
            model: None,
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn seed(&mut self, seed: u64) {
        self.ssl.seed = seed;
        self.bke.seed = seed;
    }

    pub fn data(&self) -> Result<&Path> {
        match &self.paths.data {
            Some(p) => Ok(p),
            None => bail!("no dataset given (use --data or paths.data)"),
        }
    }

    pub fn checkpoint(&self) -> Result<&Path> {
        match &self.paths.checkpoint {
            Some(p) => Ok(p),
            None => bail!("no checkpoint given (use --checkpoint or paths.checkpoint)"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            bail!("fraction must lie in (0, 1], got {}", self.fraction);
        }
        self.ssl.validate()?;
        self.bke.validate()?;
        if let Some(m) = &self.model {
            m.validate()?;
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        let path = dir.join("config.json");
        std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// `closed` or `iter` with a step count.
pub fn propagation(method: &str, iters: usize) -> Result<Propagation> {
    match method {
        "closed" => Ok(Propagation::ClosedForm),
        "iter" => {
            if iters == 0 {
                bail!("--iters must be >= 1");
            }
            Ok(Propagation::Iterative(iters))
        }
        other => bail!("unknown method {other:?}; expected closed or iter"),
    }
}
