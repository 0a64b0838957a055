//! Run configuration as a TOML document. Every field has a default, so a
//! partial file only overrides what it names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SyntheticConfig, PATCH};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pot::SinkhornConfig;
use crate::scoring::DEFAULT_SIGMA;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of the intermediate stride-4 stage.
    pub hidden: usize,
    pub seed: u64,
    /// Standardize tokens per channel with training-set statistics.
    pub normalize: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden: 32,
            seed: 17,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Weight of the transport scores in the calibrated score.
    pub lambda: f64,
    /// Add transport scores to the reconstruction score.
    pub pot: bool,
    pub sinkhorn: SinkhornConfig,
    /// Per-layer solver settings; empty means `sinkhorn` for every layer.
    pub sinkhorn_layers: Vec<SinkhornConfig>,
    /// Pixel-map smoothing.
    pub sigma: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lambda: 0.1,
            pot: true,
            sinkhorn: SinkhornConfig::default(),
            sinkhorn_layers: Vec::new(),
            sigma: DEFAULT_SIGMA,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Output root for runs that do not name an explicit directory.
    pub out: PathBuf,
    /// Corpus directory in the MVTec layout.
    pub corpus: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out: PathBuf::from("runs"),
            corpus: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Token grid implied by the image size.
    pub fn grid(&self) -> (usize, usize) {
        (self.data.image.0 / PATCH, self.data.image.1 / PATCH)
    }

    /// Makes derived fields agree (token count follows the image size) and
    /// checks everything else.
    pub fn resolve(mut self) -> Result<Self> {
        let (h, w) = self.data.image;
        if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::config(format!(
                "image size {h}×{w} must be a positive multiple of {PATCH}"
            )));
        }
        let (gh, gw) = self.grid();
        self.model.tokens = gh * gw;
        self.model.validate()?;
        self.train.validate(self.model.layers)?;
        if self.backbone.hidden == 0 {
            return Err(Error::config("backbone hidden width must be positive"));
        }
        if !(self.eval.lambda >= 0.0 && self.eval.sigma >= 0.0 && self.eval.batch_size > 0) {
            return Err(Error::config(
                "eval lambda and sigma must be nonnegative and batch_size positive",
            ));
        }
        crate::pot::layer_configs(
            &self.eval.sinkhorn,
            &self.eval.sinkhorn_layers,
            self.model.layers,
        )?;
        Ok(self)
    }
}
