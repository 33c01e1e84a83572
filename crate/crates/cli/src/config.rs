//! The TOML run configuration. Every section and key is optional; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use depthcomp::data::SceneConfig;
use depthcomp::trainer::{GradcheckConfig, SyntheticSplit, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest of training triplets; synthetic scenes are used when absent.
    pub train_manifest: Option<PathBuf>,
    /// Held-out manifest for `ablate`.
    pub eval_manifest: Option<PathBuf>,
    /// Synthetic split used when the manifests are absent.
    pub synthetic: SyntheticSplit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        // relative data paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.data.train_manifest, &mut config.data.eval_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

/// Writes `config.toml` into `dir`.
pub fn write_resolved(dir: &Path, config: &impl Serialize) -> Result<(), CliError> {
    let text = toml::to_string_pretty(config).map_err(|e| CliError::Validation(e.to_string()))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
