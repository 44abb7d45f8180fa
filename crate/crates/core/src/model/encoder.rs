use candle_core::Tensor;

use super::config::ModelConfig;
use super::gaussian::GaussianParams;
use crate::error::{ClsmError, Result};
use crate::nn::attention::StackConfig;
use crate::nn::layers::SeluMlp;
use crate::nn::{BiLstm, Ctx, Embedding, ParamStore, TransformerStack};
use crate::span::TargetSpan;
use crate::tokens::MODEL_VOCAB;

/// Unmasked relative-attention transformer over the whole window, followed by
/// a Bi-LSTM over the target positions only and two SELU MLP heads.
///
/// The posterior q(z | x, tau) and the prior base p(w | x_C, tau) are two
/// instances with separate weights; the prior sees `p` symbols in place of
/// the target tokens.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    embed: Embedding,
    position: Embedding,
    stack: TransformerStack,
    lstm: BiLstm,
    mean: SeluMlp,
    log_v: SeluMlp,
    dropout: f64,
    seq_len: usize,
}

impl ContextEncoder {
    pub fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.token_embed;
        Ok(Self {
            embed: Embedding::new(&store.pp("embed"), MODEL_VOCAB, d, 1.0)?,
            position: Embedding::new(&store.pp("position"), cfg.seq_len, d, 0.5)?,
            stack: TransformerStack::new(
                &store.pp("transformer"),
                StackConfig {
                    dim: d,
                    ff_hidden: cfg.hidden,
                    heads: cfg.heads,
                    layers: cfg.n_transformer_layers,
                    dropout: cfg.dropout,
                    relative_len: cfg.seq_len,
                    memory_dim: None,
                },
            )?,
            lstm: BiLstm::new(&store.pp("lstm"), d, cfg.hidden, cfg.n_lstm_layers, cfg.dropout)?,
            mean: SeluMlp::new(&store.pp("mean"), 2 * cfg.hidden, cfg.mlp_hidden, cfg.d_z)?,
            log_v: SeluMlp::new(&store.pp("log_v"), 2 * cfg.hidden, cfg.mlp_hidden, cfg.d_z)?,
            dropout: cfg.dropout,
            seq_len: cfg.seq_len,
        })
    }

    /// `ids: (B, K)` token indices.
    pub fn forward(&self, ids: &Tensor, span: &TargetSpan, ctx: &Ctx) -> Result<GaussianParams> {
        let (_, k) = ids.dims2()?;
        if k != self.seq_len {
            return Err(ClsmError::InvalidInput(format!("expected {} tokens, got {k}", self.seq_len)));
        }
        span.check_within(self.seq_len)?;
        let x = self.embed.forward(ids)?.broadcast_add(&self.position.rows(k)?)?;
        let x = ctx.dropout(&x, self.dropout)?;
        let e = self.stack.forward(&x, None, None, ctx)?;
        let e_target = e.narrow(1, span.start, span.length)?;
        let (h_l, h_r) = self.lstm.forward(&e_target, ctx)?;
        let h = Tensor::cat(&[&h_l, &h_r], 1)?;
        let h = ctx.dropout(&h, self.dropout)?;
        Ok(GaussianParams::new(self.mean.forward(&h)?, self.log_v.forward(&h)?))
    }
}
