//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags. Every leaf remembers where its value came from.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use vqa_core::training::ImdtSchedule;
use vqa_core::{AdamConfig, BackboneConfig, Error, Result, SimilarityConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    /// Frames are resized to `size × size`.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImdtSection {
    pub e_min: usize,
    pub loops: usize,
    pub freeze_trunk: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preprocess: PreprocessSection,
    pub backbone: BackboneConfig,
    pub similarity: SimilarityConfig,
    pub train: TrainSection,
    pub imdt: ImdtSection,
}

impl RunConfig {
    /// Defaults for FR (`nr = false`) or NR runs; they differ only in the
    /// learning rate.
    pub fn defaults(nr: bool) -> Self {
        let t = if nr { TrainConfig::nr() } else { TrainConfig::fr() };
        RunConfig {
            seed: 0,
            preprocess: PreprocessSection {
                size: vqa_core::videoio::DEFAULT_SIZE,
            },
            backbone: BackboneConfig::default(),
            similarity: SimilarityConfig::default(),
            train: TrainSection {
                learning_rate: t.learning_rate,
                batch_size: t.batch_size,
                epochs: t.epochs,
                pretrain_epochs: t.pretrain_epochs,
                beta1: t.adam.beta1,
                beta2: t.adam.beta2,
                eps: t.adam.eps,
            },
            imdt: ImdtSection {
                e_min: ImdtSchedule::DEFAULT_E_MIN,
                loops: ImdtSchedule::DEFAULT_LOOPS,
                freeze_trunk: false,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            pretrain_epochs: self.train.pretrain_epochs,
            seed: self.seed,
            adam: AdamConfig {
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                eps: self.train.eps,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.preprocess.size == 0 {
            return Err(Error::Config("preprocess.size must be positive".into()));
        }
        self.backbone.validate()?;
        self.similarity.validate()?;
        self.train_config().validate()
    }
}

/// A resolved configuration plus the origin of every leaf value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

fn leaves(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => leaves(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn set_leaf(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = table;
    for p in parts {
        t = match t.get_mut(p) {
            Some(Value::Table(inner)) => inner,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        };
    }
    match t.get(last) {
        Some(Value::Table(_)) | None => Err(Error::Config(format!("unknown config key '{key}'"))),
        Some(old) => {
            // Integers are acceptable where floats are expected.
            let value = match (old, value) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            t.insert(last.to_string(), value);
            Ok(())
        }
    }
}

/// Merges `defaults`, an optional TOML file and flag overrides (dotted
/// keys such as `train.learning_rate`).
pub fn resolve(defaults: &RunConfig, file: Option<&Path>, flags: &[(&str, Value)]) -> Result<Resolved> {
    let mut table = Table::try_from(defaults).map_err(|e| Error::Config(e.to_string()))?;
    let mut provenance = BTreeMap::new();
    let mut base = Vec::new();
    leaves("", &table, &mut base);
    for (k, _) in base {
        provenance.insert(k, Source::Default);
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let parsed: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let mut from_file = Vec::new();
        leaves("", &parsed, &mut from_file);
        for (k, v) in from_file {
            set_leaf(&mut table, &k, v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            provenance.insert(k, Source::File);
        }
    }
    for (k, v) in flags {
        set_leaf(&mut table, k, v.clone())?;
        provenance.insert(k.to_string(), Source::Flag);
    }
    let config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(Resolved { config, provenance })
}
