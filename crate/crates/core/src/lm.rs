//! Left-to-right transformer language model over the data vocabulary, used
//! only to score generated windows.

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClsmError, Result};
use crate::model::ids_tensor;
use crate::nn::attention::{mask_bias, StackConfig};
use crate::nn::{Ctx, Embedding, Linear, ParamStore, TransformerStack};
use crate::tokens::{Token, DATA_VOCAB, MODEL_VOCAB};
use crate::training::{mean_target_log_prob, scalar, LossBreakdown, Objective, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub token_embed: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    #[serde(alias = "K")]
    pub seq_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { token_embed: 128, hidden: 256, heads: 8, layers: 2, dropout: 0.1, seq_len: 128 }
    }
}

impl LmConfig {
    pub fn toy() -> Self {
        Self { token_embed: 64, hidden: 64, heads: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.token_embed, self.hidden, self.heads, self.layers, self.seq_len].contains(&0) {
            return Err(ClsmError::InvalidConfig("language model dimensions must be > 0".into()));
        }
        if self.token_embed % self.heads != 0 {
            return Err(ClsmError::InvalidConfig("token_embed must be divisible by heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ClsmError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct EvalLm {
    cfg: LmConfig,
    store: ParamStore,
    embed: Embedding,
    position: Embedding,
    stack: TransformerStack,
    out: Linear,
}

impl EvalLm {
    pub fn new(cfg: LmConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype, device);
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
                    layers: cfg.layers,
                    dropout: cfg.dropout,
                    relative_len: 0,
                    memory_dim: None,
                },
            )?,
            out: Linear::new(&store.pp("out"), d, DATA_VOCAB)?,
            cfg,
            store,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Scores `(B, K, 32)`; row `k` predicts `x[k]` from `s, x[..k]`.
    pub fn logits(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, k) = x.dims2()?;
        if k != self.cfg.seq_len {
            return Err(ClsmError::InvalidInput(format!("expected {} tokens, got {k}", self.cfg.seq_len)));
        }
        let start = Tensor::full(Token::START.index() as u32, (b, 1), x.device())?;
        let ids = Tensor::cat(&[&start, &x.narrow(1, 0, k - 1)?], 1)?;
        let h = self.embed.forward(&ids)?.broadcast_add(&self.position.rows(k)?)?;
        let h = ctx.dropout(&h, self.cfg.dropout)?;
        let causal: Vec<Vec<bool>> = (0..k).map(|r| (0..k).map(|c| c <= r).collect()).collect();
        let bias = mask_bias(&causal, h.dtype(), h.device())?;
        let h = self.stack.forward(&h, Some(&bias), None, ctx)?;
        self.out.forward(&h)
    }

    pub fn log_probs(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(candle_nn::ops::log_softmax(&self.logits(x, ctx)?, D::Minus1)?)
    }
}

impl Objective for EvalLm {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn batch_loss(&self, windows: &[&[Token]], _weight: f64, _rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<(Tensor, LossBreakdown)> {
        let x = ids_tensor(windows, self.store.device())?;
        let rec = mean_target_log_prob(&self.log_probs(&x, ctx)?, &x)?;
        let total = rec.neg()?;
        let out = LossBreakdown { rec: scalar(&rec)?, kl: 0.0, total: scalar(&total)?, beta: 0.0 };
        if !out.is_finite() {
            return Err(ClsmError::Numerical(format!("non-finite loss {out:?}")));
        }
        Ok((total, out))
    }

    fn weight_max(&self, _cfg: &TrainConfig) -> f64 {
        0.0
    }
}

/// Mean per-token negative log-likelihood of full windows.
pub fn lm_nll<S: AsRef<[Token]>>(lm: &EvalLm, samples: &[S]) -> Result<f64> {
    if samples.is_empty() {
        return Err(ClsmError::EmptyEvaluation);
    }
    for s in samples {
        if let Some(t) = s.as_ref().iter().find(|t| !t.is_data()) {
            return Err(ClsmError::InvalidToken(format!("{} is not in the language model vocabulary", t.symbol())));
        }
    }
    let ctx = Ctx::eval();
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let x = ids_tensor(chunk, lm.store.device())?;
        let lp = mean_target_log_prob(&lm.log_probs(&x, &ctx)?, &x)?;
        total += scalar(&lp)? * chunk.len() as f64;
    }
    Ok(-total / samples.len() as f64)
}

impl std::fmt::Debug for EvalLm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvalLm").field("cfg", &self.cfg).finish()
    }
}
