//! Run configuration.
//!
//! Config files are flat `section.key = value` lines (TOML dotted keys), for
//! example
//!
//! ```text
//! # faster ablation
//! train.learning_rate = 0.01
//! train.max_steps = 3000
//! window.pre_seconds = 3.5
//! synthetic.rain_min = 0.7
//! ```
//!
//! Every key must name an existing field and keep its type; anything else is
//! rejected. Unset keys keep their defaults.

use std::fs;
use std::path::Path;

use lkaguard::decoder::DecoderConfig;
use lkaguard::encoder::EncoderConfig;
use lkaguard::metrics::RougeMode;
use lkaguard::trainer::TrainConfig;
use lkaguard::windowing::WindowConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::synthetic::SyntheticConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` expects {expected}")]
    WrongType { key: String, expected: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Frozen encoder settings; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSettings {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub max_can_tokens: usize,
    pub instance_max: u8,
    pub position_embeddings: bool,
    pub seed: u64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let c = EncoderConfig::new(1);
        Self {
            image_size: c.image_size,
            patch_size: c.patch_size,
            d_model: c.d_model,
            max_can_tokens: c.max_can_tokens,
            instance_max: c.instance_max,
            position_embeddings: c.position_embeddings,
            seed: 1,
        }
    }
}

/// Base decoder settings; width follows the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSettings {
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        let c = DecoderConfig::new(1);
        Self {
            heads: c.heads,
            layers: c.layers,
            ffn_hidden: c.ffn_hidden,
            max_seq_len: c.max_seq_len,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub val_fraction: f64,
    /// Normal windows sampled per failure window and source.
    pub normal_per_failure: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            normal_per_failure: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub rouge_mode: RougeMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub window: WindowConfig,
    pub encoder: EncoderSettings,
    pub decoder: DecoderSettings,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub data: DataSettings,
    pub eval: EvalSettings,
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse()?;
        let overrides = serde_json::to_value(table).expect("TOML tables are JSON-representable");
        let mut merged = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut merged, &overrides, "")?;
        let cfg: Self = serde_json::from_value(merged).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.window.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.encoder_config(8, true).validate().map_err(|e| invalid(&e))?;
        self.decoder_config(8).validate().map_err(|e| invalid(&e))?;
        self.synthetic.validate().map_err(|e| invalid(&e))?;
        if !(self.data.normal_per_failure >= 0.0) {
            return Err(ConfigError::Invalid("data.normal_per_failure must be >= 0".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize, guided: bool) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            image_size: e.image_size,
            patch_size: e.patch_size,
            d_model: e.d_model,
            vocab_size,
            max_can_tokens: e.max_can_tokens,
            guided,
            instance_max: e.instance_max,
            position_embeddings: e.position_embeddings,
        }
    }

    pub fn decoder_config(&self, vocab_size: usize) -> DecoderConfig {
        let d = &self.decoder;
        DecoderConfig {
            d_model: self.encoder.d_model,
            heads: d.heads,
            layers: d.layers,
            ffn_hidden: d.ffn_hidden,
            max_seq_len: d.max_seq_len,
            vocab_size,
        }
    }

    /// Sets the training seed; other stages receive the run seed directly.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_f64() => "a number",
        Value::Number(_) => "an integer",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "a table",
    }
}

fn merge(base: &mut Value, over: &Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(base), Value::Object(over)) = (base, over) else {
        unreachable!("merge is only called on tables");
    };
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = base.get_mut(k).ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
        match (&*slot, v) {
            (Value::Object(_), Value::Object(_)) => merge(slot, v, &key)?,
            // Integers are accepted where floats are expected, not the reverse.
            (Value::Number(a), Value::Number(b)) if a.is_f64() || !b.is_f64() => *slot = v.clone(),
            (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => *slot = v.clone(),
            _ => {
                return Err(ConfigError::WrongType {
                    key,
                    expected: kind(slot),
                })
            }
        }
    }
    Ok(())
}
