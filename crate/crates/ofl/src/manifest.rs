//! Run manifests: everything needed to repeat a command.

use std::fs;
use std::path::Path;

use ofl_core::model::ModelConfig;
use ofl_core::synth::SceneConfig;
use ofl_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{OflError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub scene: Option<SceneConfig>,
    pub data: Option<String>,
    pub checkpoint: Option<String>,
    pub out_dir: Option<String>,
}

/// Package version, extended with `git describe` output when available.
pub fn version_string() -> String {
    let base = format!("v{}", env!("CARGO_PKG_VERSION"));
    let described = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("{base}-g{d}"),
        None => base,
    }
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            version: version_string(),
            seed,
            model: None,
            train: None,
            scene: None,
            data: None,
            checkpoint: None,
            out_dir: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| OflError::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, text + "\n").map_err(|e| OflError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OflError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| OflError::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Model description stored next to a checkpoint so it can be reloaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub model: ModelConfig,
    pub input_dim: usize,
    pub train: Option<TrainConfig>,
}

pub fn card_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

impl ModelCard {
    pub fn write(&self, checkpoint: &Path) -> Result<()> {
        let path = card_path(checkpoint);
        let text = serde_json::to_string_pretty(self).map_err(|e| OflError::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, text + "\n").map_err(|e| OflError::io(&path, e))
    }

    pub fn read(checkpoint: &Path) -> Result<Self> {
        let path = card_path(checkpoint);
        let text = fs::read_to_string(&path).map_err(|e| OflError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| OflError::Json { path, source: e })
    }
}
