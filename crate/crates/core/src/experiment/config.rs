use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::data::{CanmSpec, ROTATION_ANGLES};
use crate::metrics::ForestParams;
use crate::nested::{ModelConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    LeaveOneDomainOut,
    ChangeDetection,
    CanmRecovery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Nested,
    BetaVae,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Nested => "nested",
            ModelKind::BetaVae => "beta-vae",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nested" => Ok(ModelKind::Nested),
            "beta-vae" => Ok(ModelKind::BetaVae),
            _ => Err(ExperimentError::Config(format!(
                "unknown model {s:?}; expected nested or beta-vae"
            ))),
        }
    }
}

fn default_per_class() -> usize {
    100
}

fn default_angles() -> Vec<f64> {
    ROTATION_ANGLES.to_vec()
}

fn default_n_per_domain() -> usize {
    1000
}

/// Where the train and test splits come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Digits from an IDX pair, each drawn digit rendered at every angle.
    RotatedMnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_angles")]
        angles: Vec<f64>,
        #[serde(default)]
        seed: u64,
    },
    /// Synthetic additive-noise data with known shared and domain factors.
    Canm {
        #[serde(default)]
        canm: CanmSpec,
        #[serde(default = "default_n_per_domain")]
        n_per_domain: usize,
        #[serde(default = "default_n_per_domain")]
        n_test_per_domain: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSpec {
    fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::RotatedMnist { images, labels, .. } = self {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_change_pairs() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ForestParams,
    /// Fold used when a single domain is held out.
    #[serde(default)]
    pub holdout_domain: i32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Pairs drawn for change detection.
    #[serde(default = "default_change_pairs")]
    pub change_pairs: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Dataset containers; `<out_dir>/data` when unset.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Parses a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve_paths(base);
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        if let Some(d) = cfg.data_dir.as_mut().filter(|d| d.is_relative()) {
            *d = base.join(&*d);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must not be empty".into()));
        }
        if self.change_pairs < 2 {
            return Err(ExperimentError::Config(
                "change_pairs must be at least 2".into(),
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        match &self.dataset {
            DatasetSpec::RotatedMnist {
                per_class, angles, ..
            } => {
                if *per_class == 0 || angles.len() < 2 {
                    return Err(ExperimentError::Config(
                        "rotated-mnist needs per_class > 0 and at least two angles".into(),
                    ));
                }
            }
            DatasetSpec::Canm {
                canm,
                n_per_domain,
                n_test_per_domain,
                ..
            } => {
                canm.validate()?;
                if *n_per_domain == 0 || *n_test_per_domain == 0 {
                    return Err(ExperimentError::Config(
                        "canm sample counts must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
