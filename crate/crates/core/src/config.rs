//! Experiment configuration.
//!
//! Configs are UTF-8 JSON objects with the sections `model`, `dataset`,
//! `federation`, `optimizer`, `unlearning`, `stop` and `seeds`. Every field
//! has a default, so `{}` is a complete config. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::CsvSchema;
use crate::federated::{AggregationMode, OptimizerKind, Weighting};
use crate::model::{ModelKind, ModelSpec};
use crate::unlearning::{BatchingMode, ReinitMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub dataset: DatasetConfig,
    pub federation: FederationConfig,
    pub optimizer: OptimizerConfig,
    pub unlearning: UnlearningConfig,
    pub stop: StopConfig,
    pub seeds: Seeds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetConfig {
    Synth(SynthConfig),
    Csv(CsvConfig),
    Idx(IdxConfig),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synth(SynthConfig::default())
    }
}

/// Data drawn from the configured model at random ground-truth parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Standard deviation of the ground-truth parameters.
    pub weight_scale: f64,
    /// Label noise for regression.
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 6000,
            n_test: 1000,
            weight_scale: 1.0,
            noise_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(flatten)]
    pub schema: CsvSchema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// Keep only the first `n` training examples.
    #[serde(default)]
    pub limit_train: Option<usize>,
    #[serde(default)]
    pub limit_test: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    /// Number of clients `K`.
    pub clients: usize,
    /// Fraction of clients per round `q`.
    pub participation: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Training rounds `T`.
    pub rounds: usize,
    pub aggregation: AggregationMode,
    pub weighting: Weighting,
    /// Optimizer of the ordinary training stage.
    pub train_optimizer: OptimizerKind,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            participation: 1.0,
            local_epochs: 1,
            batch_size: 128,
            rounds: 200,
            aggregation: AggregationMode::Fedavg,
            weighting: Weighting::Samples,
            train_optimizer: OptimizerKind::Sgd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Learning rate of the Fisher update.
    pub eta: f64,
    /// Learning rate of SGD; `eta` when absent.
    pub sgd_eta: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
    pub block_size: usize,
    /// Divide the step by the effective batch size a second time.
    pub divide_step_by_batch: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            sgd_eta: None,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
            block_size: 3,
            divide_step_by_batch: false,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd_eta(&self) -> f64 {
        self.sgd_eta.unwrap_or(self.eta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearningConfig {
    /// Fraction of all training data to delete.
    pub deletion_rate: f64,
    pub unlearned_clients: usize,
    /// Upper bound on the fraction of any one client's data that is deleted.
    pub max_deletion_fraction: f64,
    pub batching: BatchingMode,
    pub reinit: ReinitMode,
    /// Round budget of rapid retraining; `federation.rounds` when absent.
    pub fim_rounds: Option<usize>,
    /// Round budget of the SGD baseline; `federation.rounds` when absent.
    pub baseline_rounds: Option<usize>,
}

impl Default for UnlearningConfig {
    fn default() -> Self {
        Self {
            deletion_rate: 0.01,
            unlearned_clients: 1,
            max_deletion_fraction: 0.5,
            batching: BatchingMode::Mask,
            reinit: ReinitMode::Fresh,
            fim_rounds: None,
            baseline_rounds: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopConfig {
    /// Stop a run once the global training loss is at or below this value;
    /// the round budget still caps the run.
    pub loss_threshold: Option<f64>,
}

/// Named seeds; each stochastic choice draws from exactly one of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Initial model of the training stage.
    pub init: u64,
    /// Client partition.
    pub partition: u64,
    /// Deleted examples.
    pub deletion: u64,
    /// Mini-batch order.
    pub batching: u64,
    /// Fresh model for retraining.
    pub reinit: u64,
    /// Synthetic data.
    pub data: u64,
    /// Client selection when participation < 1.
    pub selection: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 1,
            partition: 2,
            deletion: 3,
            batching: 4,
            reinit: 5,
            data: 6,
            selection: 7,
        }
    }
}

impl Seeds {
    pub fn set(&mut self, name: &str, value: u64) -> Result<(), ConfigError> {
        let slot = match name {
            "init" => &mut self.init,
            "partition" => &mut self.partition,
            "deletion" => &mut self.deletion,
            "batching" => &mut self.batching,
            "reinit" => &mut self.reinit,
            "data" => &mut self.data,
            "selection" => &mut self.selection,
            other => {
                return Err(ConfigError::Invalid(vec![format!("unknown seed `{other}`")]));
            }
        };
        *slot = value;
        Ok(())
    }
}

/// Object keys present in `input` but absent from `known`, as dotted paths.
fn unknown_keys(input: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(given), Value::Object(expected)) = (input, known) {
        for (key, value) in given {
            let path = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            match expected.get(key) {
                None => out.push(format!("unknown field `{path}`")),
                Some(k) => unknown_keys(value, k, &path, out),
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config, reporting every violation at once.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let raw: Value = serde_json::from_str(text)?;
        if !raw.is_object() {
            return Err(ConfigError::Invalid(vec!["config must be a JSON object".into()]));
        }
        let config: ExperimentConfig = serde_json::from_value(raw.clone())?;
        let mut problems = Vec::new();
        unknown_keys(&raw, &serde_json::to_value(&config)?, "", &mut problems);
        problems.extend(config.violations());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let problems = self.violations();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// Every violated constraint, one message per field.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        let f = &self.federation;
        let o = &self.optimizer;
        let u = &self.unlearning;
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                v.push(msg.to_string());
            }
        };
        check(f.clients >= 1, "federation.clients must be >= 1");
        check(
            f.participation > 0.0 && f.participation <= 1.0,
            "federation.participation must be in (0, 1]",
        );
        check(f.local_epochs >= 1, "federation.local_epochs must be >= 1");
        check(f.batch_size >= 1, "federation.batch_size must be >= 1");
        check(o.eta >= 0.0 && o.eta.is_finite(), "optimizer.eta must be finite and >= 0");
        check(
            o.sgd_eta.is_none_or(|e| e >= 0.0 && e.is_finite()),
            "optimizer.sgd_eta must be finite and >= 0",
        );
        check((0.0..1.0).contains(&o.beta1), "optimizer.beta1 must be in [0, 1)");
        check((0.0..1.0).contains(&o.beta2), "optimizer.beta2 must be in [0, 1)");
        check(o.eps_stab > 0.0 && o.eps_stab.is_finite(), "optimizer.eps_stab must be > 0");
        check(
            o.block_size >= 1 && o.block_size <= self.model.param_count().max(1),
            "optimizer.block_size must be in [1, parameter count]",
        );
        check(
            (0.0..1.0).contains(&u.deletion_rate),
            "unlearning.deletion_rate must be in [0, 1)",
        );
        check(
            u.unlearned_clients >= 1 && u.unlearned_clients <= f.clients,
            "unlearning.unlearned_clients must be in [1, federation.clients]",
        );
        check(
            u.max_deletion_fraction > 0.0 && u.max_deletion_fraction <= 1.0,
            "unlearning.max_deletion_fraction must be in (0, 1]",
        );
        check(
            self.stop.loss_threshold.is_none_or(f64::is_finite),
            "stop.loss_threshold must be finite",
        );
        match &self.dataset {
            DatasetConfig::Synth(s) => {
                check(
                    s.n_train >= f.clients,
                    "dataset.synth.n_train must be >= federation.clients",
                );
                check(
                    s.weight_scale >= 0.0 && s.weight_scale.is_finite(),
                    "dataset.synth.weight_scale must be finite and >= 0",
                );
                check(
                    s.noise_std >= 0.0 && s.noise_std.is_finite(),
                    "dataset.synth.noise_std must be finite and >= 0",
                );
            }
            DatasetConfig::Csv(c) => {
                check(!c.schema.label.is_empty(), "dataset.csv.label must be non-empty");
            }
            DatasetConfig::Idx(i) => {
                check(
                    i.test_images.is_some() == i.test_labels.is_some(),
                    "dataset.idx.test_images and dataset.idx.test_labels go together",
                );
                check(
                    self.model.kind.is_classifier(),
                    "dataset.idx requires a classifier model",
                );
            }
        }
        v
    }

    /// Applies `name=value` seed overrides.
    pub fn apply_seed_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        for item in overrides {
            match item.split_once('=') {
                Some((name, value)) => match value.trim().parse::<u64>() {
                    Ok(v) => {
                        if let Err(ConfigError::Invalid(p)) = self.seeds.set(name.trim(), v) {
                            problems.extend(p);
                        }
                    }
                    Err(_) => problems.push(format!("seed override `{item}` needs an integer value")),
                },
                None => problems.push(format!("seed override `{item}` must look like name=int")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// SHA-256 of the canonical JSON of everything that determines the
    /// trained model: the config minus the `unlearning` section and the
    /// deletion and reinit seeds.
    pub fn training_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut value {
            map.remove("unlearning");
            if let Some(Value::Object(seeds)) = map.get_mut("seeds") {
                seeds.remove("deletion");
                seeds.remove("reinit");
            }
        }
        sha256_hex(&canonical_json(&value))
    }

    /// SHA-256 of the whole canonical config.
    pub fn full_hash(&self) -> String {
        sha256_hex(&canonical_json(&serde_json::to_value(self).expect("config serializes")))
    }

    pub fn is_classifier(&self) -> bool {
        self.model.kind != ModelKind::LinearRegression
    }
}

/// JSON with object keys sorted recursively.
pub fn canonical_json(value: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(map) => {
                let sorted: BTreeMap<&String, Value> = map.iter().map(|(k, v)| (k, sort(v))).collect();
                Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
            }
            Value::Array(items) => Value::Array(items.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(value)).expect("value serializes")
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
