//! Experiment configuration: JSON schema, defaults and validation.
//!
//! A config file may also be a `manifest.json` written by a previous run; the
//! resolved config embedded in it is used as-is.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use gmeta::data::{generate_synthetic, load_cifar, CifarSplit, CifarVariant, MasterDataset, PartitionConfig};
use gmeta::fedsim::{FedConfig, Seeds};
use gmeta::metagrad::{default_delta, BatchPlan, Engine, HessianApplication, HyperParams};
use gmeta::nn::ModelSpec;
use serde::{Deserialize, Serialize};

/// Environment variable consulted when a CIFAR dataset has no `root`.
pub const CIFAR_ROOT_ENV: &str = "GMETA_CIFAR_ROOT";

/// A config problem located by its field path, e.g. `federation.beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian-mixture classification data.
    Synthetic {
        features: usize,
        classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default = "default_split")]
        split: CifarSplit,
    },
    Cifar100 {
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default = "default_split")]
        split: CifarSplit,
    },
}

fn default_spread() -> f64 {
    0.15
}

fn default_split() -> CifarSplit {
    CifarSplit::Train
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub n_clients: usize,
    #[serde(default = "default_samples_per_client")]
    pub samples_per_client: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub dirichlet_alpha: f64,
    /// Partition seed; each experiment seed is used when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_true")]
    pub allow_duplicates: bool,
}

fn default_samples_per_client() -> usize {
    1000
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    /// Fully connected ReLU network; input and output sizes come from the dataset.
    Mlp { hidden: Vec<usize> },
    /// `½ wᵀAw + bᵀw`, independent of the data. Only usable with `bounds`.
    Quadratic { a: Vec<f64>, b: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub participation: f64,
    pub rounds: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: usize,
    pub batch_size: usize,
    /// Batch size for evaluation fine-tuning; full train split when absent.
    #[serde(default)]
    pub eval_batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub hessian: HessianApplication,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            delta: default_delta(),
            hessian: HessianApplication::default(),
        }
    }
}

/// One training run per seed: an engine, a ν and the ν values to evaluate at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Written to the `engine` column of metrics.csv.
    pub label: String,
    pub engine: Engine,
    pub nu: usize,
    /// Defaults to `[nu]`.
    #[serde(default)]
    pub eval_nu: Vec<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub eval_batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
    #[serde(default = "default_nu_sweep")]
    pub nu_sweep: Vec<usize>,
    #[serde(default = "default_big_o")]
    pub big_o_const: f64,
    /// `F(w₀) − F*`; estimated from the initial meta-loss when absent.
    #[serde(default)]
    pub f0_gap: Option<f64>,
}

fn default_probe_count() -> usize {
    6
}

fn default_nu_sweep() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

fn default_big_o() -> f64 {
    1.0
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            enabled: false,
            probe_count: default_probe_count(),
            nu_sweep: default_nu_sweep(),
            big_o_const: default_big_o(),
            f0_gap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Record real elapsed milliseconds in `wall_ms`. Off by default so that
    /// metrics.csv is reproducible byte for byte.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub partition: PartitionSection,
    pub model: ModelConfig,
    pub federation: FederationSection,
    #[serde(default)]
    pub engine: EngineSection,
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub theory: TheorySection,
    #[serde(default)]
    pub output: OutputSection,
    pub seeds: Vec<u64>,
}

/// What a previous run wrote next to its metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
        }
    }
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(path, e.into_inner())
    })
}

impl ExperimentConfig {
    /// Parses a config or a manifest. Does not touch the file system beyond
    /// reading `text`; call [`ExperimentConfig::resolve`] afterwards.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::new("", e))?;
        let is_manifest = value.get("config").is_some() && value.get("version").is_some();
        if is_manifest {
            Ok(parse::<Manifest>(text)?.config)
        } else {
            parse(text)
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fills defaults that depend on the environment, then validates.
    pub fn resolve(&mut self) -> Result<(), ConfigError> {
        for s in &mut self.scenarios {
            if s.eval_nu.is_empty() {
                s.eval_nu = vec![s.nu];
            }
        }
        match &mut self.dataset {
            DatasetConfig::Cifar10 { root, .. } | DatasetConfig::Cifar100 { root, .. } => {
                if root.is_none() {
                    match std::env::var_os(CIFAR_ROOT_ENV) {
                        Some(v) if !v.is_empty() => *root = Some(PathBuf::from(v)),
                        _ => {
                            return Err(ConfigError::new(
                                "dataset.root",
                                format!("not set and {CIFAR_ROOT_ENV} is unset"),
                            ))
                        }
                    }
                }
            }
            DatasetConfig::Synthetic { .. } => {}
        }
        self.validate()
    }

    fn cifar(&self) -> Option<(CifarVariant, &Path, CifarSplit)> {
        match &self.dataset {
            DatasetConfig::Cifar10 { root, split } => root.as_deref().map(|r| (CifarVariant::C10, r, *split)),
            DatasetConfig::Cifar100 { root, split } => root.as_deref().map(|r| (CifarVariant::C100, r, *split)),
            DatasetConfig::Synthetic { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed is required"));
        }
        if self.scenarios.is_empty() {
            return Err(ConfigError::new("scenarios", "at least one scenario is required"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                features,
                classes,
                spread,
                samples,
                ..
            } => {
                if *features == 0 || *classes < 2 || *samples == 0 {
                    return Err(ConfigError::new(
                        "dataset",
                        "synthetic data needs features >= 1, classes >= 2, samples >= 1",
                    ));
                }
                if !(spread.is_finite() && *spread > 0.0) {
                    return Err(ConfigError::new("dataset.spread", "must be positive"));
                }
            }
            _ => {
                let (variant, root, split) = self.cifar().expect("root resolved");
                let dir = variant.resolve_dir(root);
                let (first, _) = variant.files(split)[0];
                let path = dir.join(first);
                if !path.is_file() {
                    return Err(ConfigError::new(
                        "dataset.root",
                        format!("missing dataset file {}", path.display()),
                    ));
                }
            }
        }
        if let Some(len) = self.master_len() {
            self.partition_config(0)
                .validate(len)
                .map_err(|e| ConfigError::new("partition", e))?;
        }
        if let ModelConfig::Mlp { hidden } = &self.model {
            if hidden.contains(&0) {
                return Err(ConfigError::new("model.hidden", "layer sizes must be >= 1"));
            }
        }
        self.model_spec(1, 2).map_err(|e| ConfigError::new("model", e))?;
        let f = &self.federation;
        if f.batch_size == 0 {
            return Err(ConfigError::new("federation.batch_size", "must be >= 1"));
        }
        if f.eval_batch_size == Some(0) {
            return Err(ConfigError::new("federation.eval_batch_size", "must be >= 1"));
        }
        if !(self.engine.delta.is_finite() && self.engine.delta > 0.0) {
            return Err(ConfigError::new("engine.delta", "must be positive"));
        }
        let mut labels = std::collections::HashSet::new();
        for (i, s) in self.scenarios.iter().enumerate() {
            let at = |field: &str| format!("scenarios[{i}].{field}");
            if s.label.is_empty() || s.label.contains([',', '"', '\n']) {
                return Err(ConfigError::new(
                    at("label"),
                    "must be non-empty without commas or quotes",
                ));
            }
            if !labels.insert(s.label.as_str()) {
                return Err(ConfigError::new(at("label"), format!("duplicate label {:?}", s.label)));
            }
            if s.batch_size == Some(0) || s.eval_batch_size == Some(0) {
                return Err(ConfigError::new(at("batch_size"), "must be >= 1"));
            }
            let fed = self.fed_config(s, 0, 1);
            fed.hp
                .validate(s.engine)
                .map_err(|e| ConfigError::new(format!("scenarios[{i}]"), e))?;
            fed.validate(self.partition.n_clients)
                .map_err(|e| ConfigError::new(format!("scenarios[{i}]"), e))?;
        }
        let t = &self.theory;
        if t.probe_count < 2 {
            return Err(ConfigError::new("theory.probe_count", "must be >= 2"));
        }
        if t.nu_sweep.is_empty() {
            return Err(ConfigError::new("theory.nu_sweep", "must not be empty"));
        }
        if !(t.big_o_const.is_finite() && t.big_o_const > 0.0) {
            return Err(ConfigError::new("theory.big_o_const", "must be positive"));
        }
        if let Some(g) = t.f0_gap {
            if !(g.is_finite() && g >= 0.0) {
                return Err(ConfigError::new("theory.f0_gap", "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Size of the master pool, known without loading for every dataset kind.
    fn master_len(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Synthetic { samples, .. } => Some(*samples),
            _ => self.cifar().map(|(v, _, split)| v.records(split)),
        }
    }

    pub fn load_master(&self) -> anyhow::Result<MasterDataset> {
        Ok(match &self.dataset {
            DatasetConfig::Synthetic {
                features,
                classes,
                spread,
                samples,
                seed,
            } => generate_synthetic(*features, *classes, *spread, *samples, *seed)?,
            _ => {
                let (variant, root, split) = self.cifar().expect("resolved config");
                load_cifar(root, variant, split)?
            }
        })
    }

    /// Input features and class count of the configured dataset.
    pub fn data_shape(&self) -> (usize, usize) {
        match &self.dataset {
            DatasetConfig::Synthetic { features, classes, .. } => (*features, *classes),
            DatasetConfig::Cifar10 { .. } => (3072, 10),
            DatasetConfig::Cifar100 { .. } => (3072, 100),
        }
    }

    pub fn model_spec(&self, features: usize, classes: usize) -> gmeta::Result<ModelSpec> {
        match &self.model {
            ModelConfig::Mlp { hidden } => ModelSpec::mlp(features, hidden, classes),
            ModelConfig::Quadratic { a, b } => ModelSpec::quadratic(a.clone(), b.clone()),
        }
    }

    pub fn partition_config(&self, seed: u64) -> PartitionConfig {
        let p = &self.partition;
        PartitionConfig {
            n_clients: p.n_clients,
            samples_per_client: p.samples_per_client,
            train_fraction: p.train_fraction,
            dirichlet_alpha: p.dirichlet_alpha,
            seed: p.seed.unwrap_or(seed),
            allow_duplicates: p.allow_duplicates,
        }
    }

    pub fn fed_config(&self, s: &Scenario, seed: u64, workers: usize) -> FedConfig {
        let f = &self.federation;
        let batch = s.batch_size.unwrap_or(f.batch_size);
        FedConfig {
            n_clients: self.partition.n_clients,
            participation: f.participation,
            rounds: f.rounds,
            hp: HyperParams {
                alpha: f.alpha,
                beta: f.beta,
                nu: s.nu,
                tau: f.tau,
                delta: self.engine.delta,
                batch_plan: BatchPlan::uniform(s.nu, batch),
            },
            engine: s.engine,
            eval_nu: s.eval_nu.clone(),
            seeds: Seeds::from_one(seed),
            hessian: self.engine.hessian,
            stochastic_eval: s.eval_batch_size.or(f.eval_batch_size),
            workers,
        }
    }
}
