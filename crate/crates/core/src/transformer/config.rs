use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions and regularization of one encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub ff_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub activation_dropout: f64,
    pub max_positions: usize,
}

impl TransformerConfig {
    /// Copies the three dropout rates from `from`.
    pub fn set_dropout(&mut self, from: &TransformerConfig) {
        self.dropout = from.dropout;
        self.attention_dropout = from.attention_dropout;
        self.activation_dropout = from.activation_dropout;
    }

    /// 256/1024 base preset with the usual 6+6 layers.
    pub fn base() -> Self {
        TransformerConfig {
            d_model: 256,
            ff_dim: 1024,
            num_heads: 8,
            num_encoder_layers: 6,
            num_decoder_layers: 6,
            dropout: 0.1,
            attention_dropout: 0.1,
            activation_dropout: 0.1,
            max_positions: 256,
        }
    }

    /// 512/2048 preset.
    pub fn large() -> Self {
        TransformerConfig { d_model: 512, ff_dim: 2048, ..Self::base() }
    }

    /// Small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        TransformerConfig {
            d_model: 64,
            ff_dim: 128,
            num_heads: 2,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            dropout: 0.1,
            attention_dropout: 0.0,
            activation_dropout: 0.0,
            max_positions: 64,
        }
    }

    /// Smallest preset, used by the multi-model comparison runs.
    pub fn tiny() -> Self {
        TransformerConfig {
            d_model: 32,
            ff_dim: 64,
            num_heads: 2,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            dropout: 0.0,
            attention_dropout: 0.0,
            activation_dropout: 0.0,
            max_positions: 64,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!("unknown transformer preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.ff_dim, self.num_heads, self.num_encoder_layers, self.num_decoder_layers, self.max_positions];
        if dims.contains(&0) {
            return Err(Error::config("transformer dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!("d_model {} not divisible by {} heads", self.d_model, self.num_heads)));
        }
        for (name, p) in
            [("dropout", self.dropout), ("attention_dropout", self.attention_dropout), ("activation_dropout", self.activation_dropout)]
        {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    fn attention_params(&self) -> usize {
        4 * (self.d_model * self.d_model + self.d_model)
    }

    fn ffn_params(&self) -> usize {
        2 * self.d_model * self.ff_dim + self.ff_dim + self.d_model
    }

    /// Parameters of one encoder layer: self-attention, FFN, two layer norms.
    pub fn encoder_layer_params(&self) -> usize {
        self.attention_params() + self.ffn_params() + 2 * 2 * self.d_model
    }

    /// Parameters of one decoder layer: self- and cross-attention, FFN, three layer norms.
    pub fn decoder_layer_params(&self) -> usize {
        2 * self.attention_params() + self.ffn_params() + 3 * 2 * self.d_model
    }

    pub fn encoder_params(&self) -> usize {
        self.num_encoder_layers * self.encoder_layer_params()
    }

    pub fn decoder_params(&self) -> usize {
        self.num_decoder_layers * self.decoder_layer_params()
    }
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}
