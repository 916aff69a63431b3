use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::Tensor;

/// Reserved vocabulary ids shared by every tokenizer.
pub mod special {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const CLS: u32 = 2;
    pub const MASK: u32 = 3;
    pub const COUNT: u32 = 4;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    /// Text encoder only.
    pub vocab_size: usize,
    /// Measurement encoder only.
    pub num_features: usize,
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 128,
            num_heads: 8,
            max_seq_len: 256,
            dropout_rate: 0.0,
            vocab_size: 0,
            num_features: 0,
            proj_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn text(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn measurements(num_features: usize) -> Self {
        Self {
            num_features,
            ..Self::default()
        }
    }

    /// Same shape hyperparameters with a different width/depth.
    pub fn sized(mut self, num_layers: usize, hidden_dim: usize, num_heads: usize) -> Self {
        self.num_layers = num_layers;
        self.hidden_dim = hidden_dim;
        self.num_heads = num_heads;
        self.proj_dim = hidden_dim;
        self
    }

    fn validate_common(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config(format!(
                "max_seq_len must be at least 2, got {}",
                self.max_seq_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_text(&self) -> Result<()> {
        self.validate_common()?;
        if self.vocab_size <= special::COUNT as usize {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the reserved ids",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn validate_measurements(&self) -> Result<()> {
        self.validate_common()?;
        if self.num_features == 0 {
            return Err(Error::Config("num_features must be positive".into()));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "sinusoidal positions need an even hidden_dim, got {}",
                self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Both encoders' configurations; echoed into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: EncoderConfig,
    pub measurement: EncoderConfig,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, num_features: usize) -> Self {
        Self {
            text: EncoderConfig::text(vocab_size),
            measurement: EncoderConfig::measurements(num_features),
        }
    }

    /// Applies the same depth/width/heads to both encoders.
    pub fn sized(self, num_layers: usize, hidden_dim: usize, num_heads: usize) -> Self {
        Self {
            text: self.text.sized(num_layers, hidden_dim, num_heads),
            measurement: self.measurement.sized(num_layers, hidden_dim, num_heads),
        }
    }

    pub fn with_dropout(mut self, text: f64, measurement: f64) -> Self {
        self.text.dropout_rate = text;
        self.measurement.dropout_rate = measurement;
        self
    }

    pub fn with_max_seq_len(mut self, max_seq_len: usize) -> Self {
        self.text.max_seq_len = max_seq_len;
        self.measurement.max_seq_len = max_seq_len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate_text()?;
        self.measurement.validate_measurements()?;
        if self.text.proj_dim != self.measurement.proj_dim {
            return Err(Error::Config(format!(
                "alignment spaces differ: text proj_dim {} vs measurement proj_dim {}",
                self.text.proj_dim, self.measurement.proj_dim
            )));
        }
        Ok(())
    }
}

/// A tokenized note. Position 0 holds the class token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(token_ids: Vec<u32>) -> Self {
        Self { token_ids }
    }

    pub fn attention_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.token_ids.first() != Some(&special::CLS) {
            return Err(Error::Data("token sequence must start with the class token".into()));
        }
        if self.token_ids.len() > cfg.max_seq_len {
            return Err(Error::Length {
                len: self.token_ids.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(bad) = self.token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }
}

/// A `[T × F]` window of normalized measurements on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementWindow {
    pub values: Tensor,
}

impl MeasurementWindow {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Data(format!(
                "measurement window must be T x F, got shape {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn timesteps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_features(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.num_features() != cfg.num_features {
            return Err(Error::Data(format!(
                "window has {} features, encoder expects {}",
                self.num_features(),
                cfg.num_features
            )));
        }
        if self.timesteps() + 1 > cfg.max_seq_len {
            return Err(Error::Length {
                len: self.timesteps() + 1,
                max: cfg.max_seq_len,
            });
        }
        if !self.values.all_finite() {
            return Err(Error::Data("measurement window contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Materialized encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[seq_len × hidden_dim]`
    pub hidden: Tensor,
    /// `[hidden_dim]`
    pub cls_raw: Tensor,
    /// `[proj_dim]`, unit norm.
    pub cls_aligned: Tensor,
    /// `[seq_len × vocab_size]` for text, `[seq_len × F]` for measurements.
    pub recon: Tensor,
}
