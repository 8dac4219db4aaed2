//! `manifest.toml`: what a run directory holds and which pipeline steps
//! have finished.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bsunet::config::RunConfig;
use serde::{Deserialize, Serialize};

use crate::{CliResult, Failure};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub version: String,
    /// Set once every step has finished. A complete run with all artifacts
    /// in place is left untouched.
    pub complete: bool,
    /// Finished steps in execution order.
    pub steps: Vec<String>,
    /// Artifact name → path relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Configuration with every path resolved.
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(run_dir: &Path, config: RunConfig) -> Self {
        RunManifest {
            run_id: run_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into()),
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            complete: false,
            steps: Vec::new(),
            artifacts: BTreeMap::new(),
            config,
        }
    }

    pub fn load(run_dir: &Path) -> CliResult<Option<Self>> {
        let path = run_dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        toml::from_str(&text)
            .map(Some)
            .map_err(|e| Failure::user(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, run_dir: &Path) -> CliResult {
        let text = toml::to_string(self).map_err(|e| Failure::Runtime(e.to_string()))?;
        let tmp = run_dir.join(format!("{MANIFEST}.tmp"));
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, run_dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn done(&self, step: &str) -> bool {
        self.steps.iter().any(|s| s == step)
    }

    pub fn artifact(&self, run_dir: &Path, name: &str) -> Option<PathBuf> {
        self.artifacts.get(name).map(|p| run_dir.join(p))
    }
}

/// `config` with relative paths made absolute, so a snapshot stays
/// meaningful wherever it is read from.
pub fn resolved(config: &RunConfig) -> CliResult<RunConfig> {
    use bsunet::trainer::Stage;
    let mut c = config.clone();
    c.network.spec = config.spec_path(Stage::Liver);
    c.network.tumor_spec = Some(config.spec_path(Stage::Tumor));
    c.data.root = Some(config.data_root()?);
    c.data.eval_root = Some(config.eval_root()?);
    c.base_dir = PathBuf::new();
    Ok(c)
}
