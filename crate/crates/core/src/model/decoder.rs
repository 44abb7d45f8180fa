use candle_core::{Tensor, D};

use super::config::ModelConfig;
use super::mask::build_decoder_mask;
use crate::error::{ClsmError, Result};
use crate::nn::attention::StackConfig;
use crate::nn::{Ctx, Embedding, Linear, ParamStore, TransformerStack};
use crate::span::TargetSpan;
use crate::tokens::{Token, DATA_VOCAB, MODEL_VOCAB};

/// Relative-attention transformer decoder over `s ⊕ x` with the
/// context/target mask, cross-attending to `l_z` latent memory vectors.
#[derive(Clone, Debug)]
pub struct Decoder {
    embed: Embedding,
    position: Embedding,
    latent: Linear,
    stack: TransformerStack,
    out: Linear,
    dropout: f64,
    seq_len: usize,
    d_z: usize,
    l_z: usize,
}

impl Decoder {
    pub fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.token_embed;
        Ok(Self {
            embed: Embedding::new(&store.pp("embed"), MODEL_VOCAB, d, 1.0)?,
            position: Embedding::new(&store.pp("position"), cfg.seq_len + 1, d, 0.5)?,
            latent: Linear::new(&store.pp("latent"), cfg.d_z, cfg.d_z * cfg.l_z)?,
            stack: TransformerStack::new(
                &store.pp("transformer"),
                StackConfig {
                    dim: d,
                    ff_hidden: cfg.hidden,
                    heads: cfg.heads,
                    layers: cfg.n_transformer_layers,
                    dropout: cfg.dropout,
                    relative_len: cfg.seq_len + 1,
                    memory_dim: Some(cfg.d_z),
                },
            )?,
            out: Linear::new(&store.pp("out"), d, DATA_VOCAB)?,
            dropout: cfg.dropout,
            seq_len: cfg.seq_len,
            d_z: cfg.d_z,
            l_z: cfg.l_z,
        })
    }

    /// `z: (B, d_z)` -> `(B, l_z, d_z)`.
    pub fn latent_memory(&self, z: &Tensor) -> Result<Tensor> {
        let (b, _) = z.dims2()?;
        Ok(self.latent.forward(z)?.reshape((b, self.l_z, self.d_z))?)
    }

    /// Final transformer states over all `K + 1` input positions,
    /// `(B, K + 1, token_embed)`.
    pub fn hidden(&self, x_teacher: &Tensor, span: &TargetSpan, z: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, k) = x_teacher.dims2()?;
        if k != self.seq_len {
            return Err(ClsmError::InvalidInput(format!("expected {} tokens, got {k}", self.seq_len)));
        }
        let (bz, dz) = z.dims2()?;
        if bz != b || dz != self.d_z {
            return Err(ClsmError::InvalidInput(format!(
                "latent batch ({bz}, {dz}) does not match ({b}, {})",
                self.d_z
            )));
        }
        span.check_within(self.seq_len)?;
        let start = Tensor::full(Token::START.index() as u32, (b, 1), x_teacher.device())?;
        let ids = Tensor::cat(&[&start, x_teacher], 1)?;
        let x = self.embed.forward(&ids)?.broadcast_add(&self.position.rows(k + 1)?)?;
        let x = ctx.dropout(&x, self.dropout)?;
        let bias = build_decoder_mask(span, self.seq_len).to_bias(x.dtype(), x.device())?;
        let memory = self.latent_memory(z)?;
        self.stack.forward(&x, Some(&bias), Some(&memory), ctx)
    }

    /// Unnormalized scores `(B, span.length, 32)`. The prediction for target
    /// token `i` is read at input position `span.start + i` (the position of
    /// the previous token, or `s`).
    pub fn logits(&self, x_teacher: &Tensor, span: &TargetSpan, z: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.hidden(x_teacher, span, z, ctx)?;
        self.out.forward(&h.narrow(1, span.start, span.length)?)
    }

    pub fn log_probs(&self, x_teacher: &Tensor, span: &TargetSpan, z: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(candle_nn::ops::log_softmax(&self.logits(x_teacher, span, z, ctx)?, D::Minus1)?)
    }
}
