//! Run configuration: one TOML document with optional sections. Seeds have
//! no defaults; a command that needs a missing seed fails naming the field.

use std::path::PathBuf;

use lmplab_core::dataset::{Perturbation, DEFAULT_LOAD_LEVEL};
use lmplab_core::nn::{Architecture, ModelKind};
use lmplab_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0} is required (set it in the config or pass the matching flag)")]
    Missing(&'static str),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub n: usize,
    pub avg_degree: f64,
    pub limit_scale: f64,
    pub seed: Option<u64>,
    /// Read the grid from this case file instead of generating one.
    pub case_path: Option<PathBuf>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            n: 30,
            avg_degree: 2.5,
            limit_scale: 1.0,
            seed: None,
            case_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub count: usize,
    pub bound_jitter: f64,
    pub cost_jitter: f64,
    pub splits: [f64; 3],
    pub seed: Option<u64>,
    /// Operating point of the base problem between congestion onset (0) and
    /// the infeasibility edge (1).
    pub load_level: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = Perturbation::default();
        Self {
            count: 5000,
            bound_jitter: p.bound_jitter,
            cost_jitter: p.cost_jitter,
            splits: [0.8, 0.1, 0.1],
            seed: None,
            load_level: DEFAULT_LOAD_LEVEL,
        }
    }
}

impl DataSection {
    pub fn perturbation(&self) -> Perturbation {
        Perturbation {
            bound_jitter: self.bound_jitter,
            cost_jitter: self.cost_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: String,
    /// Layer widths; the default shape for `kind` when absent.
    pub dims: Option<Vec<usize>>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: "gnn".into(),
            dims: None,
            k: None,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self, n_nodes: usize, d: usize) -> Result<Architecture, ConfigError> {
        let kind = ModelKind::parse(&self.kind).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "model.kind must be gnn, fcnn or gidnn, got {:?}",
                self.kind
            ))
        })?;
        let mut arch = Architecture::default_for(kind, n_nodes, d);
        if let Some(dims) = &self.dims {
            arch.dims = dims.clone();
        }
        if let Some(k) = self.k {
            if kind != ModelKind::Gnn {
                return Err(ConfigError::Invalid("model.K only applies to gnn".into()));
            }
            arch.order = k;
        }
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub early_stopping: bool,
    pub lambda_reg: f64,
    pub seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            early_stopping: t.early_stopping,
            lambda_reg: t.lambda_reg,
            seed: None,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            early_stopping: self.early_stopping,
            lambda_reg: self.lambda_reg,
            seed: self.seed.ok_or(ConfigError::Missing("train.seed"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub max_lines: usize,
    pub finetune_epochs: usize,
    pub seeds: Vec<u64>,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            max_lines: 2,
            finetune_epochs: 5,
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub transfer: TransferSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        // relative case paths are relative to the config file
        if let (Some(case), Some(dir)) = (&cfg.grid.case_path, path.parent()) {
            if case.is_relative() {
                cfg.grid.case_path = Some(dir.join(case));
            }
        }
        Ok(cfg)
    }

    /// Sets every seed field to `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.grid.seed = Some(seed);
        self.data.seed = Some(seed);
        self.train.seed = Some(seed);
    }

    /// SHA-256 of the canonical TOML rendering of the effective config.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn grid_seed(&self) -> Result<u64, ConfigError> {
        self.grid.seed.ok_or(ConfigError::Missing("grid.seed"))
    }

    pub fn data_seed(&self) -> Result<u64, ConfigError> {
        self.data.seed.ok_or(ConfigError::Missing("data.seed"))
    }
}
