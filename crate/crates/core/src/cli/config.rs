//! Line-based `key=value` configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::ChannelPlan;
use crate::training::{LossFlags, LossWeights, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { key: String, origin: String },
    #[error("{origin}: line {line}: expected key=value, got `{text}`")]
    Syntax { origin: String, line: usize, text: String },
    #[error("{key}: cannot parse `{value}` as {expected}")]
    Value {
        key: String,
        value: String,
        expected: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Known keys and their default values.
pub const KEYS: &[(&str, &str)] = &[
    ("lr", "0.0002"),
    ("batch_size", "2"),
    ("rounds", "10"),
    ("average_last", "5"),
    ("seed", "0"),
    ("clamp_eps", "1e-7"),
    ("alpha", "0.08"),
    ("beta", "1.1"),
    ("gamma", "0.5"),
    ("use_gan_loss", "true"),
    ("use_bce", "true"),
    ("use_mae", "true"),
    ("enable_msfrb", "true"),
    ("enable_am", "true"),
    ("augment", "false"),
    ("holdout", "true"),
    ("stages", "16,32,64,128,256"),
];

/// Where a value came from, for diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Default,
    Env(&'static str),
    File(String),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => write!(f, "defaults"),
            Origin::Env(v) => write!(f, "environment {v}"),
            Origin::File(p) => write!(f, "{p}"),
            Origin::Flag => write!(f, "command line"),
        }
    }
}

/// Layered settings: each later `set` overrides earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandConfig {
    values: BTreeMap<&'static str, (String, Origin)>,
}

impl Default for CommandConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|&(k, v)| (k, (v.to_string(), Origin::Default)))
                .collect(),
        }
    }
}

impl CommandConfig {
    pub fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<()> {
        let Some(&(k, _)) = KEYS.iter().find(|(k, _)| *k == key) else {
            return Err(ConfigError::UnknownKey {
                key: key.to_string(),
                origin: origin.to_string(),
            });
        };
        self.values.insert(k, (value.to_string(), origin));
        Ok(())
    }

    /// Applies every `key=value` line of `text`. Blank lines and anything
    /// after `#` are ignored.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    origin: origin.to_string(),
                    line: i + 1,
                    text: line.to_string(),
                });
            };
            self.set(k.trim(), v.trim(), Origin::File(origin.to_string()))?;
        }
        Ok(())
    }

    /// `key=value` assignment as given on the command line.
    pub fn merge_assignment(&mut self, text: &str) -> Result<()> {
        let (k, v) = text.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: Origin::Flag.to_string(),
            line: 1,
            text: text.to_string(),
        })?;
        self.set(k.trim(), v.trim(), Origin::Flag)
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values.get(key).unwrap_or_else(|| panic!("unregistered key {key}")).0
    }

    pub fn origin(&self, key: &str) -> &Origin {
        &self.values.get(key).unwrap_or_else(|| panic!("unregistered key {key}")).1
    }

    fn parse<T: FromStr>(&self, key: &str, expected: &'static str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| ConfigError::Value {
            key: key.to_string(),
            value: v.to_string(),
            expected,
        })
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key, "a number")
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "a nonnegative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key, "a nonnegative integer")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key, "true or false")
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| ConfigError::Value {
                    key: key.to_string(),
                    value: self.raw(key).to_string(),
                    expected: "a comma-separated list of integers",
                })
            })
            .collect()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.f64("lr")?,
            batch_size: self.usize("batch_size")?,
            rounds: self.usize("rounds")?,
            average_last: self.usize("average_last")?,
            seed: self.u64("seed")?,
            clamp_eps: self.f64("clamp_eps")?,
            weights: LossWeights {
                alpha: self.f64("alpha")?,
                beta: self.f64("beta")?,
                gamma: self.f64("gamma")?,
            },
            flags: LossFlags {
                gan: self.bool("use_gan_loss")?,
                bce: self.bool("use_bce")?,
                mae: self.bool("use_mae")?,
            },
            augment: self.bool("augment")?,
            holdout: self.bool("holdout")?,
        })
    }

    /// Generator and discriminator plans.
    pub fn plans(&self) -> Result<(ChannelPlan, ChannelPlan)> {
        let stages = self.usize_list("stages")?;
        let g = ChannelPlan {
            enable_msfrb: self.bool("enable_msfrb")?,
            enable_am: self.bool("enable_am")?,
            ..ChannelPlan::generator_default().with_stages(&stages)
        };
        let d = ChannelPlan::discriminator_default().with_stages(&stages);
        Ok((g, d))
    }
}
