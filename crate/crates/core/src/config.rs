//! Run configuration file: `[network]`, `[data]`, `[train]` and
//! `[weightmap]` sections in TOML. Relative paths resolve against the
//! directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{Channels, LabelTarget, Scaling};
use crate::error::{Error, Result};
use crate::losses::{EuclideanForm, LossWeights};
use crate::network::ModelSpec;
use crate::optim::OptimizerConfig;
use crate::trainer::{Boundary, LrSchedule, Stage, TrainConfig};
use crate::weightmap::WeightMapParams;

/// Environment variable that overrides `data.root`.
pub const DATA_ENV: &str = "BSUNET_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Segmenter description for the liver stage.
    pub spec: PathBuf,
    /// Segmenter description for the tumor stage; defaults to `spec`.
    #[serde(default)]
    pub tumor_spec: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory of `volume-N` / `segmentation-N` NIfTI files.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Cases predicted and scored by the pipeline; defaults to the data root.
    #[serde(default)]
    pub eval_root: Option<PathBuf>,
    #[serde(default)]
    pub channels: Channels,
    #[serde(default)]
    pub scaling: Scaling,
    #[serde(default)]
    pub label_target: LabelTarget,
    #[serde(default)]
    pub boundary: Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Stage default (10 liver, 20 tumor) when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub epochs: usize,
    #[serde(default)]
    pub max_iterations: Option<usize>,
    pub lr: LrSchedule,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub euclidean: EuclideanForm,
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub weightmap: WeightMapParams,
    /// Directory the file was read from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text)?;
        c.base_dir = base_dir.into();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::from_toml_str(&text, base).map_err(|e| match e {
            Error::TomlDe(e) => Error::format(path, e.to_string()),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.weightmap.validate()?;
        self.train_config(Stage::Liver).validate()?;
        self.train_config(Stage::Tumor).validate()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Data root, with the environment variable taking precedence.
    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(v) = std::env::var_os(DATA_ENV) {
            return Ok(PathBuf::from(v));
        }
        self.data
            .root
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::config(format!("no data root: set data.root or {DATA_ENV}")))
    }

    pub fn eval_root(&self) -> Result<PathBuf> {
        match &self.data.eval_root {
            Some(p) => Ok(self.resolve(p)),
            None => self.data_root(),
        }
    }

    pub fn spec_path(&self, stage: Stage) -> PathBuf {
        match (stage, &self.network.tumor_spec) {
            (Stage::Tumor, Some(p)) => self.resolve(p),
            _ => self.resolve(&self.network.spec),
        }
    }

    /// Segmenter description for a stage, checked against the channel setting.
    pub fn model_spec(&self, stage: Stage) -> Result<ModelSpec> {
        let spec = ModelSpec::load(&self.spec_path(stage))?;
        if spec.in_channels() != self.data.channels.count() {
            return Err(Error::config(format!(
                "network '{}' takes {} input channels but data.channels is {}",
                spec.name(),
                spec.in_channels(),
                self.data.channels.count()
            )));
        }
        Ok(spec)
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage,
            batch_size: t.batch_size.unwrap_or(stage.default_batch_size()),
            epochs: t.epochs,
            max_iterations: t.max_iterations,
            lr: t.lr,
            optimizer: t.optimizer,
            loss_weights: t.loss_weights,
            euclidean: t.euclidean,
            weightmap: self.weightmap,
            augment: t.augment,
            seed: t.seed,
        }
    }

    /// Whether phase one runs (bottleneck supervision enabled).
    pub fn supervised(&self) -> bool {
        self.train.loss_weights.w2 > 0.0
    }
}
