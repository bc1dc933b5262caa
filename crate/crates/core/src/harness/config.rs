//! `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored; keys and values are
//! trimmed. Recognized keys:
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `strategy.encoder`, `strategy.decoder` | `full_ft`, `frozen`, `lora` or `dora` | `dora`, `lora` |
//! | `rank`, `scale` | adapter rank and scale | 2, 1 |
//! | `magnitude_trainable` | train DoRA magnitudes | false |
//! | `lora_output_proj` | also wrap the vocabulary projection | false |
//! | `lr` | learning rate for every strategy | unset |
//! | `lr.peft`, `lr.full` | defaults when `lr` is unset | 5e-5, 1e-5 |
//! | `epochs`, `batch`, `seed` | loop budget and seed | 20, 16, 0 |
//! | `beta1`, `beta2`, `eps`, `weight_decay` | AdamW | 0.9, 0.999, 1e-8, 0.01 |
//! | `checkpoint_every` | epochs between snapshots, 0 for none | 0 |
//! | `model.*` | any [`ModelConfig`] field | desk-scale defaults |
//! | `vocab` | vocabulary file | built-in |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::adamw::AdamWConfig;
use crate::model::{AdapterOptions, ModelConfig, Strategy, StrategyPair};
use crate::{Error, Result};

/// Parses `key=value` lines into a sorted map; duplicate keys are an error.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out
            .insert(key.to_string(), value.trim().to_string())
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{key}`",
                i + 1
            )));
        }
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{value}`")))
}

/// Optimization settings for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: StrategyPair,
    pub adapter: AdapterOptions,
    /// Overrides the strategy-dependent default when set.
    pub lr: Option<f64>,
    pub lr_peft: f64,
    pub lr_full: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyPair::dlora(),
            adapter: AdapterOptions::default(),
            lr: None,
            lr_peft: 5e-5,
            lr_full: 1e-5,
            epochs: 20,
            batch: 16,
            seed: 0,
            adamw: AdamWConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// `lr` if given, else `lr.peft` when any component uses an adapter and `lr.full` otherwise.
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(if self.strategy.uses_adapter() {
            self.lr_peft
        } else {
            self.lr_full
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.adamw.validate()
    }
}

/// A parsed configuration file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub vocab: Option<PathBuf>,
    /// Whether the file set `rank`; adapter runs have no default rank.
    pub rank_given: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let (t, m) = (&mut cfg.train, &mut cfg.model);
        for (key, value) in parse_key_values(text)? {
            let v = value.as_str();
            let k = key.as_str();
            match k {
                "strategy.encoder" => t.strategy.encoder = v.parse::<Strategy>()?,
                "strategy.decoder" => t.strategy.decoder = v.parse::<Strategy>()?,
                "rank" => {
                    t.adapter.rank = parse_value(k, v)?;
                    cfg.rank_given = true;
                }
                "scale" => t.adapter.scale = parse_value(k, v)?,
                "magnitude_trainable" => t.adapter.magnitude_trainable = parse_value(k, v)?,
                "lora_output_proj" => t.adapter.adapt_output_projection = parse_value(k, v)?,
                "lr" => t.lr = Some(parse_value(k, v)?),
                "lr.peft" => t.lr_peft = parse_value(k, v)?,
                "lr.full" => t.lr_full = parse_value(k, v)?,
                "epochs" => t.epochs = parse_value(k, v)?,
                "batch" => t.batch = parse_value(k, v)?,
                "seed" => {
                    t.seed = parse_value(k, v)?;
                    t.adapter.seed = t.seed;
                }
                "beta1" => t.adamw.beta1 = parse_value(k, v)?,
                "beta2" => t.adamw.beta2 = parse_value(k, v)?,
                "eps" => t.adamw.eps = parse_value(k, v)?,
                "weight_decay" => t.adamw.weight_decay = parse_value(k, v)?,
                "checkpoint_every" => t.checkpoint_every = parse_value(k, v)?,
                "model.channels" => m.channels = parse_value(k, v)?,
                "model.image_height" => m.image_height = parse_value(k, v)?,
                "model.image_width" => m.image_width = parse_value(k, v)?,
                "model.patch_size" => m.patch_size = parse_value(k, v)?,
                "model.embed_dim" => m.embed_dim = parse_value(k, v)?,
                "model.head_count" => m.head_count = parse_value(k, v)?,
                "model.encoder_layers" => m.encoder_layers = parse_value(k, v)?,
                "model.decoder_layers" => m.decoder_layers = parse_value(k, v)?,
                "model.ffn_dim" => m.ffn_dim = parse_value(k, v)?,
                "model.vocab_size" => m.vocab_size = parse_value(k, v)?,
                "model.max_decode_len" => m.max_decode_len = parse_value(k, v)?,
                "model.activation" => m.activation = v.parse()?,
                "vocab" => cfg.vocab = Some(PathBuf::from(v)),
                _ => return Err(Error::Config(format!("unknown configuration key `{k}`"))),
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Errors unless `rank` was set, when the strategy (or the whole grid,
    /// with `any_adapter`) trains adapters.
    pub fn require_rank(&self, any_adapter: bool) -> Result<()> {
        if !self.rank_given && (any_adapter || self.train.strategy.uses_adapter()) {
            return Err(Error::Config(
                "adapter strategies need an explicit rank (config key `rank` or --rank)".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
