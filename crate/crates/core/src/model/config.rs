use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Swish => "swish",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "swish" => Ok(Activation::Swish),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub head_count: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest generated sequence; also bounds the teacher-forcing input length.
    pub max_decode_len: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    /// The desk-scale configuration used for the synthetic corpus.
    fn default() -> Self {
        Self {
            channels: 1,
            image_height: 32,
            image_width: 160,
            patch_size: 16,
            embed_dim: 64,
            head_count: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 256,
            vocab_size: 75,
            max_decode_len: 12,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    /// The default layout at half width (`D = 32`, feed-forward 128).
    pub fn small() -> Self {
        Self {
            embed_dim: 32,
            ffn_dim: 128,
            ..Self::default()
        }
    }

    /// The smallest configuration exercised by gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: 1,
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            embed_dim: 8,
            head_count: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 16,
            vocab_size: 6,
            max_decode_len: 6,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("head_count", self.head_count),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_decode_len", self.max_decode_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "image {}×{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by head_count {}",
                self.embed_dim, self.head_count
            )));
        }
        if self.vocab_size <= super::tokens::SPECIAL_COUNT {
            return Err(Error::Config(
                "vocab_size must leave room beyond the four special tokens".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.head_count
    }

    pub fn patch_count(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Rows of the decoder position table.
    pub fn decoder_positions(&self) -> usize {
        self.max_decode_len + 1
    }
}
