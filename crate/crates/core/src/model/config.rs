use serde::{Deserialize, Serialize};

use crate::error::{ClsmError, Result};
use crate::span::SpanGrid;

/// Architecture hyperparameters shared by the encoder, prior, flow and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_z: usize,
    /// Number of latent memory vectors the decoder cross-attends to.
    pub l_z: usize,
    /// Transformer model width.
    pub token_embed: usize,
    /// Transformer feed-forward width and LSTM hidden size.
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Hidden width of the Gaussian-parameter MLPs.
    pub mlp_hidden: usize,
    pub n_transformer_layers: usize,
    pub n_lstm_layers: usize,
    pub n_coupling_layers: usize,
    pub coupling_mlp_hidden: usize,
    pub leaky_slope: f64,
    /// Window length K.
    #[serde(alias = "K")]
    pub seq_len: usize,
    /// Steps per bar; spans are bar-aligned.
    pub bar: usize,
    pub max_bars: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_z: 128,
            l_z: 4,
            token_embed: 128,
            hidden: 256,
            heads: 8,
            dropout: 0.1,
            mlp_hidden: 512,
            n_transformer_layers: 2,
            n_lstm_layers: 2,
            n_coupling_layers: 4,
            coupling_mlp_hidden: 256,
            leaky_slope: 0.01,
            seq_len: 128,
            bar: 16,
            max_bars: 4,
        }
    }
}

impl ModelConfig {
    /// Small model used for the synthetic-corpus runs: hidden 64, d_z 16 and
    /// one transformer layer, with the default embedding width.
    pub fn toy() -> Self {
        Self {
            d_z: 16,
            hidden: 64,
            mlp_hidden: 64,
            n_transformer_layers: 1,
            n_lstm_layers: 1,
            coupling_mlp_hidden: 64,
            ..Self::default()
        }
    }

    /// Minimal model for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_z: 4,
            l_z: 2,
            token_embed: 8,
            hidden: 8,
            heads: 2,
            dropout: 0.0,
            mlp_hidden: 8,
            n_transformer_layers: 1,
            n_lstm_layers: 1,
            n_coupling_layers: 2,
            coupling_mlp_hidden: 8,
            leaky_slope: 0.01,
            seq_len: 8,
            bar: 2,
            max_bars: 4,
        }
    }

    pub fn grid(&self) -> SpanGrid {
        SpanGrid { window: self.seq_len, bar: self.bar, max_bars: self.max_bars }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_z", self.d_z),
            ("l_z", self.l_z),
            ("token_embed", self.token_embed),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("n_transformer_layers", self.n_transformer_layers),
            ("n_lstm_layers", self.n_lstm_layers),
            ("n_coupling_layers", self.n_coupling_layers),
            ("coupling_mlp_hidden", self.coupling_mlp_hidden),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ClsmError::InvalidConfig(format!("{name} must be > 0")));
        }
        if self.d_z % 2 != 0 {
            return Err(ClsmError::InvalidConfig(format!("d_z = {} must be even", self.d_z)));
        }
        if self.token_embed % self.heads != 0 {
            return Err(ClsmError::InvalidConfig(format!(
                "token_embed {} is not divisible by {} heads",
                self.token_embed, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ClsmError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.grid().validate()
    }
}
