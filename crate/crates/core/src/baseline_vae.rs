//! Sequence VAE baseline: Bi-LSTM encoder, autoregressive LSTM decoder and a
//! standard-normal prior. Contextual generation interpolates linearly in Z
//! and decodes from the left context only, so targets never depend on the
//! right context.

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::Context;
use crate::error::{ClsmError, Result};
use crate::model::ids_tensor;
use crate::nn::lstm::LstmState;
use crate::nn::{BiLstm, Ctx, Embedding, Linear, Lstm, ParamStore};
use crate::sampler::{choose, rows_f64, strategy_rng, ContextualModel, DecodeStrategy};
use crate::span::TargetSpan;
use crate::tokens::{Token, TokenSeq, DATA_VOCAB, MODEL_VOCAB};
use crate::training::{mean_target_log_prob, normal_noise, scalar, LossBreakdown, Objective, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub d_z: usize,
    pub token_embed: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub dropout: f64,
    /// Final KL weight.
    pub gamma: f64,
    #[serde(alias = "K")]
    pub seq_len: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { d_z: 128, token_embed: 128, hidden: 256, n_layers: 2, dropout: 0.1, gamma: 0.4, seq_len: 128 }
    }
}

impl VaeConfig {
    pub fn toy() -> Self {
        Self { d_z: 16, token_embed: 64, hidden: 64, n_layers: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_z, self.token_embed, self.hidden, self.n_layers, self.seq_len].contains(&0) {
            return Err(ClsmError::InvalidConfig("VAE dimensions must be > 0".into()));
        }
        if !(self.gamma >= 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(ClsmError::InvalidConfig("gamma must be >= 0 and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior with variance `exp(log_v)`.
#[derive(Clone, Debug)]
pub struct VaePosterior {
    pub mean: Tensor,
    pub log_v: Tensor,
}

impl VaePosterior {
    pub fn sample(&self, eps: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + (&self.log_v * 0.5)?.exp()?.mul(eps)?)?)
    }
}

/// `KL(N(mean, exp(log_v)) || N(0, I))` per row, shape `(B,)`.
pub fn gaussian_kl(mean: &Tensor, log_v: &Tensor) -> Result<Tensor> {
    let t = ((mean.sqr()? + log_v.exp()?)? - 1.0)?;
    Ok(((t - log_v)?.sum(D::Minus1)? * 0.5)?)
}

#[derive(Clone)]
pub struct Vae {
    cfg: VaeConfig,
    store: ParamStore,
    enc_embed: Embedding,
    encoder: BiLstm,
    mean: Linear,
    log_v: Linear,
    dec_embed: Embedding,
    init: Vec<Linear>,
    decoder: Lstm,
    out: Linear,
}

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype, device);
        let (e, h, z) = (cfg.token_embed, cfg.hidden, cfg.d_z);
        let enc = store.pp("encoder");
        let dec = store.pp("decoder");
        Ok(Self {
            enc_embed: Embedding::new(&enc.pp("embed"), MODEL_VOCAB, e, 1.0)?,
            encoder: BiLstm::new(&enc.pp("lstm"), e, h, cfg.n_layers, cfg.dropout)?,
            mean: Linear::new(&enc.pp("mean"), 2 * h, z)?,
            log_v: Linear::new(&enc.pp("log_v"), 2 * h, z)?,
            dec_embed: Embedding::new(&dec.pp("embed"), MODEL_VOCAB, e, 1.0)?,
            init: (0..cfg.n_layers)
                .map(|l| Linear::new(&dec.pp("init").pp(l), z, h))
                .collect::<Result<_>>()?,
            decoder: Lstm::new(&dec.pp("lstm"), e + z, h, cfg.n_layers, cfg.dropout)?,
            out: Linear::new(&dec.pp("out"), h, DATA_VOCAB)?,
            cfg,
            store,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encode(&self, x: &Tensor, ctx: &Ctx) -> Result<VaePosterior> {
        let e = ctx.dropout(&self.enc_embed.forward(x)?, self.cfg.dropout)?;
        let (h_l, h_r) = self.encoder.forward(&e, ctx)?;
        let h = Tensor::cat(&[&h_l, &h_r], 1)?;
        Ok(VaePosterior { mean: self.mean.forward(&h)?, log_v: self.log_v.forward(&h)? })
    }

    fn initial_state(&self, z: &Tensor) -> Result<LstmState> {
        let c = Tensor::zeros((z.dim(0)?, self.cfg.hidden), z.dtype(), z.device())?;
        self.init.iter().map(|l| Ok((l.forward(z)?.tanh()?, c.clone()))).collect()
    }

    /// Embed `ids: (B, T)` and append `z` to every step.
    fn decoder_inputs(&self, ids: &Tensor, z: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let e = ctx.dropout(&self.dec_embed.forward(ids)?, self.cfg.dropout)?;
        let zs = z.unsqueeze(1)?.broadcast_as((b, t, self.cfg.d_z))?;
        Ok(Tensor::cat(&[&e, &zs], D::Minus1)?)
    }

    /// Teacher-forced scores `(B, T, 32)` for `x: (B, T)`: row `t` predicts
    /// `x[t]` from `s, x[..t]` and `z`.
    pub fn logits(&self, x: &Tensor, z: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, t) = x.dims2()?;
        let start = Tensor::full(Token::START.index() as u32, (b, 1), x.device())?;
        let ids = Tensor::cat(&[&start, &x.narrow(1, 0, t - 1)?], 1)?;
        let (h, _) = self.decoder.forward(&self.decoder_inputs(&ids, z, ctx)?, self.initial_state(z)?, ctx)?;
        self.out.forward(&ctx.dropout(&h, self.cfg.dropout)?)
    }

    /// Teacher-force `s ⊕ left`, then generate `span.length` tokens for every
    /// row of `zs`. The right context is never read.
    pub fn decode_from_left(&self, zs: &Tensor, left: &[Token], length: usize, strategy: DecodeStrategy) -> Result<Vec<TokenSeq>> {
        let (b, _) = zs.dims2()?;
        let ctx = Ctx::eval();
        let mut rng = strategy_rng(strategy);
        let mut prefix = vec![Token::START];
        prefix.extend_from_slice(left);
        let prefix: Vec<TokenSeq> = vec![prefix; b];
        let ids = ids_tensor(&prefix, zs.device())?;
        let (h, mut state) = self.decoder.forward(&self.decoder_inputs(&ids, zs, &ctx)?, self.initial_state(zs)?, &ctx)?;
        let mut last = h.i((.., h.dim(1)? - 1, ..))?;
        let mut out: Vec<TokenSeq> = vec![Vec::with_capacity(length); b];
        for i in 0..length {
            let rows = rows_f64(&self.out.forward(&last)?)?;
            let chosen: Vec<Token> = rows
                .iter()
                .map(|r| Token::from_index(choose(r, strategy, &mut rng)))
                .collect::<Result<_>>()?;
            for (seq, t) in out.iter_mut().zip(&chosen) {
                seq.push(*t);
            }
            if i + 1 == length {
                break;
            }
            let ids = ids_tensor(&chosen.iter().map(|t| vec![*t]).collect::<Vec<_>>(), zs.device())?;
            let (h, next) = self.decoder.forward(&self.decoder_inputs(&ids, zs, &ctx)?, state, &ctx)?;
            state = next;
            last = h.squeeze(1)?;
        }
        Ok(out)
    }
}

/// Per-token reconstruction plus analytic KL, weighted by `gamma`, with
/// explicit noise `eps: (B, d_z)`.
pub fn vae_loss(model: &Vae, x: &Tensor, gamma: f64, eps: &Tensor, ctx: &Ctx) -> Result<(Tensor, LossBreakdown)> {
    let q = model.encode(x, ctx)?;
    let z = q.sample(eps)?;
    let lp = candle_nn::ops::log_softmax(&model.logits(x, &z, ctx)?, D::Minus1)?;
    let rec = mean_target_log_prob(&lp, x)?;
    let kl = gaussian_kl(&q.mean, &q.log_v)?.mean_all()?;
    let total = ((kl.clone() * gamma)? - &rec)?;
    let out = LossBreakdown { rec: scalar(&rec)?, kl: scalar(&kl)?, total: scalar(&total)?, beta: gamma };
    if !out.is_finite() {
        return Err(ClsmError::Numerical(format!("non-finite loss {out:?}")));
    }
    Ok((total, out))
}

/// Linear interpolation in Z; `J + 1` latents with exact endpoints.
pub fn vae_interpolate_latents(z1: &Tensor, z2: &Tensor, j: usize) -> Result<Vec<Tensor>> {
    if j == 0 {
        return Err(ClsmError::InvalidInput("J must be at least 1".into()));
    }
    let mut out = vec![z1.clone()];
    for k in 1..j {
        let a = k as f64 / j as f64;
        out.push(((z1 * (1.0 - a))? + (z2 * a)?)?);
    }
    out.push(z2.clone());
    Ok(out)
}

/// Decode every interpolant from the left context and reassemble with both
/// contexts.
pub fn vae_interpolate(model: &Vae, z1: &Tensor, z2: &Tensor, j: usize, context: &Context) -> Result<Vec<TokenSeq>> {
    let zs = Tensor::cat(&vae_interpolate_latents(z1, z2, j)?, 0)?;
    let targets = model.decode_from_left(&zs, &context.left, context.span.length, DecodeStrategy::Greedy)?;
    Ok(targets.iter().map(|t| context.assemble(t)).collect())
}

impl Objective for Vae {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn batch_loss(&self, windows: &[&[Token]], weight: f64, rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<(Tensor, LossBreakdown)> {
        let x = ids_tensor(windows, self.store.device())?;
        let eps = normal_noise(rng, (windows.len(), self.cfg.d_z), self.store.dtype(), self.store.device())?;
        vae_loss(self, &x, weight, &eps, ctx)
    }

    fn weight_max(&self, _cfg: &TrainConfig) -> f64 {
        self.cfg.gamma
    }
}

impl ContextualModel for Vae {
    fn latent_dim(&self) -> usize {
        self.cfg.d_z
    }

    fn window_len(&self) -> usize {
        self.cfg.seq_len
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    fn sample_latent(&self, _context: &Context, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        normal_noise(rng, (1, self.cfg.d_z), self.store.dtype(), self.store.device())
    }

    fn interpolate_latents(&self, z1: &Tensor, z2: &Tensor, j: usize, _context: &Context) -> Result<Vec<Tensor>> {
        vae_interpolate_latents(z1, z2, j)
    }

    fn vary_latent(&self, z: &Tensor, delta: f64, _context: &Context, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(ClsmError::InvalidInput(format!("variation amount {delta} must be finite and >= 0")));
        }
        let eps = normal_noise(rng, (1, self.cfg.d_z), self.store.dtype(), self.store.device())?;
        if delta == 0.0 {
            return Ok(z.clone());
        }
        Ok((z + (eps * delta)?)?)
    }

    fn decode_targets(&self, zs: &Tensor, context: &Context, strategy: DecodeStrategy) -> Result<Vec<TokenSeq>> {
        self.decode_from_left(zs, &context.left, context.span.length, strategy)
    }

    fn posterior_mean(&self, window: &[Token], _span: TargetSpan) -> Result<Tensor> {
        Ok(self.encode(&ids_tensor(&[window], self.store.device())?, &Ctx::eval())?.mean)
    }
}

impl std::fmt::Debug for Vae {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vae").field("cfg", &self.cfg).finish()
    }
}

/// Monte-Carlo estimate of the Gaussian KL and its standard error.
pub fn monte_carlo_kl(mean: &[f64], log_v: &[f64], n: usize, seed: u64) -> (f64, f64) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = 0.0;
        for (m, lv) in mean.iter().zip(log_v) {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = m + (0.5 * lv).exp() * e;
            // log q(z) - log p(z); the 2*pi terms cancel
            v += -0.5 * (lv + e * e) + 0.5 * z * z;
        }
        vals.push(v);
    }
    let mean_v = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean_v).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean_v, (var / n as f64).sqrt())
}
