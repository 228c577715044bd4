//! Experiment configuration: a TOML table of dotted sections, merged over the defaults.

use serde::{Deserialize, Serialize};
use std::path::Path;
use tasd_core::mix_seed;
use tasd_core::segnet::{ArchConfig, TrainConfig};
use tasd_core::shape_dictionary::DictLearnConfig;
use tasd_core::synthdata::BenchmarkConfig;
use tasd_core::tta::{AblationMode, TtaConfig};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictSection {
    pub k: usize,
    /// Defaults to `1.2 / sqrt(m)` when absent.
    pub lambda: Option<f64>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub base_width: usize,
    pub depth: usize,
    pub reg_hidden: usize,
    pub use_shape_prior: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub beta: f64,
    pub bn_momentum: f64,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSection {
    pub noise_magnitude: f64,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaSection {
    pub step_size: f64,
    pub mode: AblationMode,
    pub resample_seeds: bool,
    pub sample_statistics: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Square image side; overrides `benchmark.shape.height/width`.
    pub resolution: usize,
    pub dict: DictSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub perturbation: PerturbationSection,
    pub tta: TtaSection,
    pub benchmark: BenchmarkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        let train = TrainConfig::default();
        let tta = TtaConfig::default();
        Self {
            master_seed: 0,
            resolution: 64,
            dict: DictSection {
                k: arch.k,
                lambda: None,
                epochs: 10,
            },
            model: ModelSection {
                base_width: arch.base_width,
                depth: arch.depth,
                reg_hidden: arch.reg_hidden,
                use_shape_prior: true,
            },
            train: TrainSection {
                epochs: 60,
                batch_size: train.batch_size,
                learning_rate: train.learning_rate,
                adam_beta1: train.adam_beta1,
                adam_beta2: train.adam_beta2,
                adam_eps: train.adam_eps,
                beta: train.beta,
                bn_momentum: train.bn_momentum,
                augment: train.augment,
            },
            perturbation: PerturbationSection {
                noise_magnitude: tta.noise_magnitude,
                dropout_rate: tta.dropout_rate,
            },
            tta: TtaSection {
                step_size: tta.step_size,
                mode: tta.mode,
                resample_seeds: tta.resample_seeds,
                sample_statistics: tta.sample_statistics,
            },
            benchmark: BenchmarkConfig::default(),
        }
    }
}

/// Every seed a run consumes, derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub benchmark: u64,
    pub dictionary: u64,
    pub init: u64,
    pub train: u64,
    pub tta: u64,
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then `key=value` overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        Self::from_table(table)
    }

    pub fn from_table(user: Table) -> Result<Self> {
        let mut merged = to_table(&Self::default())?;
        merge(&mut merged, user.clone());
        let mut cfg: Self = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        // Anything the user wrote must survive a round trip; otherwise it was a typo.
        let known = to_table(&cfg)?;
        if let Some(key) = unknown_key(&user, &known, "") {
            return Err(CliError::Config(format!("unknown configuration key {key:?}")));
        }
        cfg.benchmark.shape.height = cfg.resolution;
        cfg.benchmark.shape.width = cfg.resolution;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CliError::Config(msg.to_string()));
        if self.resolution < 8 {
            return bad("resolution must be at least 8");
        }
        if self.dict.k == 0 {
            return bad("dict.k must be positive");
        }
        if let Some(l) = self.dict.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return bad("dict.lambda must be finite and non-negative");
            }
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return bad("train.learning_rate must be positive");
        }
        if !(self.tta.step_size.is_finite() && self.tta.step_size >= 0.0) {
            return bad("tta.step_size must be non-negative");
        }
        self.arch().validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            benchmark: self.master_seed,
            dictionary: mix_seed(self.master_seed, 11),
            init: mix_seed(self.master_seed, 12),
            train: mix_seed(self.master_seed, 13),
            tta: mix_seed(self.master_seed, 14),
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            height: self.resolution,
            width: self.resolution,
            in_channels: 1,
            base_width: self.model.base_width,
            depth: self.model.depth,
            reg_hidden: self.model.reg_hidden,
            k: self.dict.k,
            use_shape_prior: self.model.use_shape_prior,
        }
    }

    pub fn dict_learn(&self) -> DictLearnConfig {
        DictLearnConfig {
            k: self.dict.k,
            lambda: self.dict.lambda,
            epochs: self.dict.epochs,
            seed: self.seeds().dictionary,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            adam_eps: self.train.adam_eps,
            beta: self.train.beta,
            bn_momentum: self.train.bn_momentum,
            augment: self.train.augment,
            seed: self.seeds().train,
        }
    }

    pub fn tta_config(&self, mode: AblationMode, stream_seed: u64) -> TtaConfig {
        TtaConfig {
            mode,
            step_size: self.tta.step_size,
            noise_magnitude: self.perturbation.noise_magnitude,
            dropout_rate: self.perturbation.dropout_rate,
            master_seed: stream_seed,
            resample_seeds: self.tta.resample_seeds,
            sample_statistics: self.tta.sample_statistics,
        }
    }
}

fn to_table(cfg: &ExperimentConfig) -> Result<Table> {
    Table::try_from(cfg).map_err(|e| CliError::Config(e.to_string()))
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{part:?} in {key:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn unknown_key(user: &Table, known: &Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => return Some(path),
            (Some(Value::Table(kt)), Value::Table(ut)) => {
                if let Some(bad) = unknown_key(ut, kt, &path) {
                    return Some(bad);
                }
            }
            _ => {}
        }
    }
    None
}
