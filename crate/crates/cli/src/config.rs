use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mcfr_core::net::McfrConfig;
use mcfr_core::simulator::SimConfig;
use mcfr_core::tracker::{OfflineConfig, TrackerConfig};

/// Everything a run needs besides its input files. Missing sections take
/// their defaults; unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: McfrConfig,
    pub sim: SimConfig,
    pub tracker: TrackerConfig,
    pub training: OfflineConfig,
    pub seeds: Seeds,
    pub paths: Paths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Weight initialization.
    pub model: u64,
    pub tracker: u64,
    pub training: u64,
    pub simulator: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            model: 1,
            tracker: 3,
            training: 0,
            simulator: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Event file name inside a sequence directory.
    pub events: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            events: "events.csv".into(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: McfrConfig::desk(),
            sim: SimConfig::default(),
            tracker: TrackerConfig::default(),
            training: OfflineConfig::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(mcfr_core::Error::from)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| mcfr_core::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
            .with_context(|| "reading run config")?;
        Self::from_json(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sim.validate()?;
        self.tracker.validate()?;
        Ok(())
    }
}
