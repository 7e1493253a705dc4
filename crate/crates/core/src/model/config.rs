use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 64-wide, 4 heads, 2 blocks, 256-wide feed-forward.
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len,
            vocab_size,
            dropout_rate: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
}

impl LstmConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_size == 0 || self.hidden_size == 0 || self.n_layers == 0 {
            return Err(ModelError::Config(
                "LSTM input_size, hidden_size and n_layers must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Full shape description of a hybrid classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub lstm: LstmConfig,
    pub classes: usize,
}

impl Architecture {
    /// Desk-scale defaults with a single 64-unit LSTM layer.
    pub fn desk(vocab_size: usize, max_len: usize, classes: usize) -> Self {
        let encoder = EncoderConfig::desk(vocab_size, max_len);
        Self {
            encoder,
            lstm: LstmConfig {
                input_size: encoder.d_model,
                hidden_size: 64,
                n_layers: 1,
            },
            classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.lstm.validate()?;
        if self.lstm.input_size != self.encoder.d_model {
            return Err(ModelError::Config(format!(
                "LSTM input_size {} must equal d_model {}",
                self.lstm.input_size, self.encoder.d_model
            )));
        }
        if self.classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let e = &self.encoder;
        let (d, ff) = (e.d_model, e.d_ff);
        let embeddings = (e.vocab_size + e.max_len) * d;
        let per_block = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d;
        let h = self.lstm.hidden_size;
        let lstm: usize = (0..self.lstm.n_layers)
            .map(|l| {
                let input = if l == 0 { self.lstm.input_size } else { h };
                4 * (input * h + h * h + h)
            })
            .sum();
        embeddings + e.n_layers * per_block + lstm + h * self.classes + self.classes
    }
}
