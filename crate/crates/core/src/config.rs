//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are applied in
//! file order, and command-line flags are applied afterwards so they win.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::data::SyntheticSpec;
use crate::model::ModelConfig;
use crate::train::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}`: {message}")]
    Value {
        key: String,
        value: String,
        message: String,
    },
}

/// Parses `key = value` lines into ordered pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        pairs.push((key.to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse<T>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T: FromStr,
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        message: e.to_string(),
    })
}

/// Model and training settings for a `train` run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if set_model(&mut self.model, key, value)? {
            return Ok(());
        }
        if set_train(&mut self.train, key, value)? {
            return Ok(());
        }
        Err(ConfigError::UnknownKey(key.to_string()))
    }
}

/// Returns `Ok(false)` when `key` is not a model key.
pub fn set_model(m: &mut ModelConfig, key: &str, value: &str) -> Result<bool, ConfigError> {
    match key {
        "input_dim" => m.input_dim = parse(key, value)?,
        "hidden" => m.hidden = parse(key, value)?,
        "memory_dim" => m.memory_dim = parse(key, value)?,
        "controller_width" => m.controller_width = parse(key, value)?,
        "classes" => m.classes = parse(key, value)?,
        "thr" => m.thr = parse(key, value)?,
        "history" => m.history = parse(key, value)?,
        "fallback" => m.fallback = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn model_to_text(m: &ModelConfig) -> String {
    format!(
        "input_dim = {}\nhidden = {}\nmemory_dim = {}\ncontroller_width = {}\nclasses = {}\n\
         thr = {:?}\nhistory = {}\nfallback = {}\n",
        m.input_dim,
        m.hidden,
        m.memory_dim,
        m.controller_width,
        m.classes,
        m.thr,
        m.history,
        m.fallback
    )
}

pub fn model_from_text(text: &str) -> Result<ModelConfig, ConfigError> {
    let mut m = ModelConfig::default();
    for (k, v) in parse_pairs(text)? {
        if !set_model(&mut m, &k, &v)? {
            return Err(ConfigError::UnknownKey(k));
        }
    }
    Ok(m)
}

/// Returns `Ok(false)` when `key` is not a training key.
pub fn set_train(t: &mut TrainConfig, key: &str, value: &str) -> Result<bool, ConfigError> {
    match key {
        "epochs" => t.epochs = parse(key, value)?,
        "batch" => t.batch_size = parse(key, value)?,
        "momentum" => t.momentum = parse(key, value)?,
        "clip" => t.clip = parse(key, value)?,
        "seed" => t.seed = parse(key, value)?,
        "threads" => t.threads = parse(key, value)?,
        "schedule" => {
            t.schedule = LrSchedule::preset(value).ok_or_else(|| ConfigError::Value {
                key: key.to_string(),
                value: value.to_string(),
                message: "expected desk|spatial|temporal".into(),
            })?
        }
        "lr" => {
            let lr = parse(key, value)?;
            match &mut t.schedule {
                LrSchedule::Step { base, .. } | LrSchedule::Milestones { base, .. } => *base = lr,
            }
        }
        "decay_factor" => {
            let f = parse(key, value)?;
            match &mut t.schedule {
                LrSchedule::Step { factor, .. } | LrSchedule::Milestones { factor, .. } => {
                    *factor = f
                }
            }
        }
        "decay_unit" => {
            let u = parse(key, value)?;
            match &mut t.schedule {
                LrSchedule::Step { unit, .. } | LrSchedule::Milestones { unit, .. } => *unit = u,
            }
        }
        "decay_interval" => {
            let interval = parse(key, value)?;
            t.schedule = match t.schedule {
                LrSchedule::Step {
                    base, factor, unit, ..
                }
                | LrSchedule::Milestones {
                    base, factor, unit, ..
                } => LrSchedule::Step {
                    base,
                    interval,
                    factor,
                    unit,
                },
            };
        }
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn set_synthetic(s: &mut SyntheticSpec, key: &str, value: &str) -> Result<(), ConfigError> {
    match key {
        "classes" => s.classes = parse(key, value)?,
        "dim" => s.dim = parse(key, value)?,
        "length" => s.length = parse(key, value)?,
        "segment" => s.segment = parse(key, value)?,
        "noise" => s.noise = parse(key, value)?,
        "distractor" => s.distractor = parse(key, value)?,
        "signal" => s.signal = parse(key, value)?,
        "train" => s.train = parse(key, value)?,
        "test" => s.test = parse(key, value)?,
        "seed" => s.seed = parse(key, value)?,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}
