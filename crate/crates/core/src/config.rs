//! Run configuration files (TOML).
//!
//! A model file names its detector and holds the architecture and training
//! tables; command-line flags override individual values after loading.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{Fm5Config, MlpTrainConfig};
use crate::data::Detector;
use crate::flow_matching::FMTrainConfig;
use crate::latent::VaeTrainConfig;
use crate::model::{UNetConfig, VAEConfig};
use crate::{Error, Result};

pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    Ok(toml::from_str(text)?)
}

pub fn load_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    parse_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Pixel-space (or latent-space) flow matching: `[unet]` and `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmRunConfig {
    pub detector: Detector,
    pub unet: UNetConfig,
    #[serde(default)]
    pub train: FMTrainConfig,
}

impl FmRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.train.validate()
    }
}

/// VAE stage: `[vae]` and `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeRunConfig {
    pub detector: Detector,
    pub vae: VAEConfig,
    #[serde(default)]
    pub train: VaeTrainConfig,
}

/// Direct-estimation baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesConfig {
    pub knn_k: usize,
    pub mlp: MlpTrainConfig,
    pub fm5: Fm5Config,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        Self {
            knn_k: crate::baselines::DEFAULT_K,
            mlp: MlpTrainConfig::default(),
            fm5: Fm5Config::default(),
        }
    }
}
