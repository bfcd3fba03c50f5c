//! Run configuration files and the manifest written next to every run.

use std::path::{Path, PathBuf};

use cats_core::preprocess::PreprocessConfig;
use cats_core::trainer::TrainConfig;
use cats_core::{CatsConfig, CatsError, Result};
use serde::{Deserialize, Serialize};

use crate::data::DatasetEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `images/` and `labels/`.
    pub train: PathBuf,
    /// Validation directory; the training set is reused when absent.
    #[serde(default)]
    pub val: Option<PathBuf>,
}

/// A training run as written in a TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_model")]
    pub model: String,
    /// Base architecture: `desk`, `full` or `toy`. Ignored when `network` is given.
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Explicit architecture; overrides the preset.
    #[serde(default)]
    pub network: Option<CatsConfig>,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_model() -> String {
    "cats".into()
}

fn default_preset() -> String {
    "desk".into()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CatsError::config("config", e.message().to_string()))
    }

    /// Read a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CatsError::config("--config", format!("{}: {}", path.display(), e)))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.data.train);
        if let Some(v) = cfg.data.val.as_mut() {
            rebase(v);
        }
        rebase(&mut cfg.output_dir);
        Ok(cfg)
    }

    /// Fill in the architecture from the preset and check every section.
    pub fn resolve(mut self) -> Result<Self> {
        let network = match self.network.take() {
            Some(n) => {
                if self.num_classes.is_some_and(|k| k != n.num_classes()) {
                    return Err(CatsError::config(
                        "num_classes",
                        format!("{} disagrees with network.unet.num_classes = {}", self.num_classes.unwrap(), n.num_classes()),
                    ));
                }
                n
            }
            None => CatsConfig::preset(&self.preset, self.num_classes.unwrap_or(2))?,
        };
        network.validate()?;
        self.num_classes = Some(network.num_classes());
        self.network = Some(network);
        self.preprocess.validate()?;
        self.train.checkpoint_dir = Some(self.output_dir.clone());
        self.train.validate(self.network().unet.batch_norm)?;
        for (field, dir) in [("data.train", Some(&self.data.train)), ("data.val", self.data.val.as_ref())] {
            if let Some(dir) = dir {
                if !dir.is_dir() {
                    return Err(CatsError::config(field, format!("data directory {} does not exist", dir.display())));
                }
            }
        }
        Ok(self)
    }

    /// The resolved architecture.
    pub fn network(&self) -> &CatsConfig {
        self.network.as_ref().expect("resolved config")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset: Vec<DatasetEntry>,
}

impl RunManifest {
    pub fn new(config: &RunConfig, dataset: Vec<DatasetEntry>) -> Self {
        Self {
            tool: "cats".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.train.seed,
            config: config.clone(),
            dataset,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| CatsError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "output_dir = \"out\"\n[data]\ntrain = \"/\"\n"
    }

    #[test]
    fn defaults_follow_the_training_recipe() {
        let cfg = RunConfig::parse(minimal()).unwrap().resolve().unwrap();
        assert_eq!(cfg.model, "cats");
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.network(), &CatsConfig::desk());
    }

    #[test]
    fn unknown_fields_and_bad_values_name_the_field() {
        let err = RunConfig::parse(&format!("{}[train]\nlearning_rate = 1.0\n", minimal())).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{}", err);
        let err = RunConfig::parse(&format!("{}[train]\nbatch_size = 1\n", minimal())).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("train.batch_size"), "{}", err);
        let err = RunConfig::parse(&format!("preset = \"huge\"\n{}", minimal())).unwrap().resolve().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn explicit_network_must_agree_with_class_count() {
        let net = toml::to_string(&CatsConfig::toy()).unwrap();
        let text = format!("num_classes = 3\n{}[network]\n{}", minimal(), format!("\n{net}").replace("\n[", "\n[network."));
        let err = RunConfig::parse(&text).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("num_classes"), "{}", err);
    }
}
