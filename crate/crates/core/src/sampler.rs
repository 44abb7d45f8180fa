//! Generation: prior sampling, autoregressive target decoding, interpolation
//! between two latents and variation around one, for any model exposing the
//! [`ContextualModel`] interface.

use candle_core::{DType, IndexOp, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::Context;
use crate::error::{ClsmError, Result};
use crate::model::{ids_tensor, Clsm};
use crate::nn::Ctx;
use crate::span::TargetSpan;
use crate::tokens::{Token, TokenSeq};
use crate::training::normal_noise;

/// How a categorical row becomes a token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecodeStrategy {
    /// Argmax; used for every evaluation.
    #[default]
    Greedy,
    /// Sampling from softmax(logits / temperature).
    Sample { temperature: f64, seed: u64 },
}

/// A latent-variable model that fills a target span given its context.
/// Latents are `(1, d_z)` tensors.
pub trait ContextualModel {
    fn latent_dim(&self) -> usize;
    fn window_len(&self) -> usize;
    fn dtype(&self) -> DType;
    fn device(&self) -> &candle_core::Device;

    /// A draw from the model's prior over latents given the context.
    fn sample_latent(&self, context: &Context, rng: &mut ChaCha8Rng) -> Result<Tensor>;

    /// `J + 1` latents from `z1` (alpha = 0) to `z2` (alpha = 1). The
    /// endpoints are returned unchanged.
    fn interpolate_latents(&self, z1: &Tensor, z2: &Tensor, j: usize, context: &Context) -> Result<Vec<Tensor>>;

    /// Perturb `z` by `delta` times a draw of the model's variation noise.
    fn vary_latent(&self, z: &Tensor, delta: f64, context: &Context, rng: &mut ChaCha8Rng) -> Result<Tensor>;

    /// Decode one target per row of `zs: (B, d_z)`.
    fn decode_targets(&self, zs: &Tensor, context: &Context, strategy: DecodeStrategy) -> Result<Vec<TokenSeq>>;

    /// Posterior mean latent for a full window.
    fn posterior_mean(&self, window: &[Token], span: TargetSpan) -> Result<Tensor>;
}

/// Pick a token index from a row of data-token logits.
pub(crate) fn choose(row: &[f64], strategy: DecodeStrategy, rng: &mut ChaCha8Rng) -> usize {
    match strategy {
        DecodeStrategy::Greedy => {
            // first maximum, so ties resolve deterministically
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        }
        DecodeStrategy::Sample { temperature, .. } => {
            let t = temperature.max(1e-6);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|v| ((v - m) / t).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    return i;
                }
                u -= wi;
            }
            w.len() - 1
        }
    }
}

pub(crate) fn strategy_rng(strategy: DecodeStrategy) -> ChaCha8Rng {
    match strategy {
        DecodeStrategy::Greedy => ChaCha8Rng::seed_from_u64(0),
        DecodeStrategy::Sample { seed, .. } => ChaCha8Rng::seed_from_u64(seed),
    }
}

pub(crate) fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

fn check_context(model: &impl ContextualModel, context: &Context) -> Result<()> {
    if context.window_len() != model.window_len() {
        return Err(ClsmError::InvalidSpan(format!(
            "context describes a window of {}, model expects {}",
            context.window_len(),
            model.window_len()
        )));
    }
    Ok(())
}

/// Sample `w ~ N(base)` and map it back through the inverse flow.
pub fn sample_from_prior(model: &Clsm, context: &Context, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    check_context(model, context)?;
    let base = model.prior_base_for(context, &Ctx::eval())?;
    let eps = normal_noise(rng, (1, model.config().d_z), model.dtype(), model.device())?;
    model.flow_inverse(&base.sample(&eps)?)
}

/// Left-to-right decoding of the target. Every step re-runs the decoder over
/// the whole window with the tokens chosen so far; the causal-within-target
/// mask makes not-yet-chosen positions invisible to the row being read.
pub fn greedy_decode_target(model: &Clsm, zs: &Tensor, context: &Context, strategy: DecodeStrategy) -> Result<Vec<TokenSeq>> {
    check_context(model, context)?;
    let (b, _) = zs.dims2()?;
    let span = context.span;
    let mut rng = strategy_rng(strategy);
    let mut targets: Vec<TokenSeq> = vec![Vec::with_capacity(span.length); b];
    let ctx = Ctx::eval();
    for i in 0..span.length {
        let windows: Vec<TokenSeq> = targets.iter().map(|t| context.assemble(t)).collect();
        let ids = ids_tensor(&windows, model.device())?;
        let logits = model.decode_logits(&ids, &span, zs, &ctx)?;
        let rows = rows_f64(&logits.i((.., i, ..))?)?;
        for (t, row) in targets.iter_mut().zip(rows) {
            t.push(Token::from_index(choose(&row, strategy, &mut rng))?);
        }
    }
    Ok(targets)
}

/// `z(alpha) = f^-1((1 - alpha) f(z1) + alpha f(z2))` for `alpha = j / J`.
pub fn interpolate_latents(model: &Clsm, z1: &Tensor, z2: &Tensor, j: usize) -> Result<Vec<Tensor>> {
    if j == 0 {
        return Err(ClsmError::InvalidInput("J must be at least 1".into()));
    }
    let (w1, _) = model.flow_forward(z1)?;
    let (w2, _) = model.flow_forward(z2)?;
    let mut out = Vec::with_capacity(j + 1);
    out.push(z1.clone());
    for k in 1..j {
        let a = k as f64 / j as f64;
        let w = ((&w1 * (1.0 - a))? + (&w2 * a)?)?;
        out.push(model.flow_inverse(&w)?);
    }
    out.push(z2.clone());
    Ok(out)
}

/// `z(delta) = f^-1(f(z) + delta * eps)`, `eps ~ N(0, diag(prior base variance))`.
pub fn vary_latent(model: &Clsm, z: &Tensor, delta: f64, context: &Context, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(ClsmError::InvalidInput(format!("variation amount {delta} must be finite and >= 0")));
    }
    let base = model.prior_base_for(context, &Ctx::eval())?;
    let eps = base.std()?.mul(&normal_noise(rng, (1, model.config().d_z), model.dtype(), model.device())?)?;
    if delta == 0.0 {
        return Ok(z.clone());
    }
    let (w, _) = model.flow_forward(z)?;
    model.flow_inverse(&(w + (eps * delta)?)?)
}

impl ContextualModel for Clsm {
    fn latent_dim(&self) -> usize {
        self.config().d_z
    }

    fn window_len(&self) -> usize {
        self.config().seq_len
    }

    fn dtype(&self) -> DType {
        Clsm::dtype(self)
    }

    fn device(&self) -> &candle_core::Device {
        Clsm::device(self)
    }

    fn sample_latent(&self, context: &Context, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        sample_from_prior(self, context, rng)
    }

    fn interpolate_latents(&self, z1: &Tensor, z2: &Tensor, j: usize, _context: &Context) -> Result<Vec<Tensor>> {
        interpolate_latents(self, z1, z2, j)
    }

    fn vary_latent(&self, z: &Tensor, delta: f64, context: &Context, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        vary_latent(self, z, delta, context, rng)
    }

    fn decode_targets(&self, zs: &Tensor, context: &Context, strategy: DecodeStrategy) -> Result<Vec<TokenSeq>> {
        greedy_decode_target(self, zs, context, strategy)
    }

    fn posterior_mean(&self, window: &[Token], span: TargetSpan) -> Result<Tensor> {
        let ids = ids_tensor(&[window], Clsm::device(self))?;
        Ok(self.encode_posterior(&ids, &span, &Ctx::eval())?.mean)
    }
}

/// Decode one latent and reassemble the full window.
pub fn generate<M: ContextualModel + ?Sized>(model: &M, z: &Tensor, context: &Context, strategy: DecodeStrategy) -> Result<TokenSeq> {
    let t = model.decode_targets(z, context, strategy)?;
    Ok(context.assemble(&t[0]))
}

/// `J + 1` full windows along the interpolation path, decoded in one batch.
pub fn interpolate_contextual<M: ContextualModel + ?Sized>(
    model: &M,
    z1: &Tensor,
    z2: &Tensor,
    j: usize,
    context: &Context,
    strategy: DecodeStrategy,
) -> Result<(Vec<Tensor>, Vec<TokenSeq>)> {
    let zs = model.interpolate_latents(z1, z2, j, context)?;
    let batch = Tensor::cat(&zs, 0)?;
    let targets = model.decode_targets(&batch, context, strategy)?;
    Ok((zs, targets.iter().map(|t| context.assemble(t)).collect()))
}

/// One variation of `z`, decoded and reassembled.
pub fn vary_contextual<M: ContextualModel + ?Sized>(
    model: &M,
    z: &Tensor,
    delta: f64,
    context: &Context,
    rng: &mut ChaCha8Rng,
    strategy: DecodeStrategy,
) -> Result<(Tensor, TokenSeq)> {
    let zv = model.vary_latent(z, delta, context, rng)?;
    let seq = generate(model, &zv, context, strategy)?;
    Ok((zv, seq))
}

/// Flatten a `(1, d)` latent to a vector.
pub fn latent_to_vec(z: &Tensor) -> Result<Vec<f64>> {
    Ok(z.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Max distance of each interior point of `ws` from the segment `ws[0]..ws[J]`
/// at its nominal fraction `j / J`.
pub fn collinearity_deviation(ws: &[Tensor]) -> Result<f64> {
    let j = ws.len().saturating_sub(1);
    if j == 0 {
        return Ok(0.0);
    }
    let (a, b) = (&ws[0], &ws[j]);
    let mut worst = 0.0f64;
    for (k, w) in ws.iter().enumerate() {
        let alpha = k as f64 / j as f64;
        let line = ((a * (1.0 - alpha))? + (b * alpha)?)?;
        let dev = (w - line)?.abs()?.max(D::Minus1)?.max(0)?;
        worst = worst.max(dev.to_dtype(DType::F64)?.to_scalar::<f64>()?);
    }
    Ok(worst)
}
