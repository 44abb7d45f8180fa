//! ELBO objective, KL annealing and the optimization loop shared by the
//! CLSM, the VAE baseline and the evaluation language model.

mod gradcheck;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ClsmError, Result};
use crate::model::{ids_tensor, mask_targets, Clsm, GaussianParams};
use crate::nn::{Ctx, ParamStore};
use crate::span::TargetSpan;
use crate::tokens::Token;

pub use gradcheck::{gradient_check, GradCheckEntry, GradCheckReport};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Final KL weight (beta for the CLSM).
    pub beta_max: f64,
    /// Epochs over which the KL weight ramps linearly from 0.
    pub anneal_epochs: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            epochs: 2,
            lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            beta_max: 0.012,
            anneal_epochs: 2.0,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(ClsmError::InvalidConfig("batch and epochs must be > 0".into()));
        }
        if !(self.lr >= 0.0) || !(self.beta_max >= 0.0) || !(self.anneal_epochs > 0.0) || !(self.grad_clip >= 0.0) {
            return Err(ClsmError::InvalidConfig(
                "lr, beta_max and grad_clip must be >= 0 and anneal_epochs > 0".into(),
            ));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(ClsmError::InvalidConfig(format!("Adam beta {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Scalar summary of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean log-likelihood per target token (negative; higher is better).
    pub rec: f64,
    /// Single-sample KL estimate, averaged over the batch.
    pub kl: f64,
    /// Minimized quantity `-(rec - beta * kl)`.
    pub total: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.rec.is_finite() && self.kl.is_finite() && self.total.is_finite()
    }
}

/// `beta_max * min(1, step / total_anneal_steps)`.
pub fn beta_schedule(step: u64, total_anneal_steps: i64, beta_max: f64) -> Result<f64> {
    if total_anneal_steps <= 0 {
        return Err(ClsmError::InvalidConfig(format!(
            "anneal length must be positive, got {total_anneal_steps}"
        )));
    }
    Ok(beta_max * (step as f64 / total_anneal_steps as f64).min(1.0))
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean log-probability of `targets: (B, L)` under `log_probs: (B, L, V)`.
pub fn mean_target_log_prob(log_probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let idx = targets.contiguous()?.unsqueeze(D::Minus1)?;
    let picked = log_probs.contiguous()?.gather(&idx, D::Minus1)?.squeeze(D::Minus1)?;
    Ok(picked.mean_all()?)
}

/// Standard-normal noise drawn from a seeded generator.
pub fn normal_noise(rng: &mut ChaCha8Rng, shape: (usize, usize), dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..shape.0 * shape.1).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Token ids for a batch of windows plus the prior's view of them.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub x_prior: Tensor,
    pub span: TargetSpan,
}

impl Batch {
    pub fn new<S: AsRef<[Token]>>(windows: &[S], span: TargetSpan, device: &candle_core::Device) -> Result<Self> {
        for w in windows {
            span.check_within(w.as_ref().len())?;
        }
        Ok(Self {
            x: ids_tensor(windows, device)?,
            x_prior: ids_tensor(&mask_targets(windows, &span), device)?,
            span,
        })
    }

    pub fn size(&self) -> usize {
        self.x.dim(0).unwrap_or(0)
    }
}

/// Per-sample KL estimate `log q(z) - log p(z | x_C, tau)`, shape `(B,)`.
pub fn kl_estimate(model: &Clsm, q: &GaussianParams, z: &Tensor, base: &GaussianParams) -> Result<Tensor> {
    Ok((q.log_density(z)? - model.prior_log_density(z, base)?)?)
}

/// Single-sample ELBO terms with explicit reparameterization noise
/// `eps: (B, d_z)`. Returns the differentiable total with its breakdown.
pub fn compute_loss(model: &Clsm, batch: &Batch, beta: f64, eps: &Tensor, ctx: &Ctx) -> Result<(Tensor, LossBreakdown)> {
    let span = &batch.span;
    let q = model.encode_posterior(&batch.x, span, ctx)?;
    let z = q.sample(eps)?;
    let log_probs = model.decode_log_probs(&batch.x, span, &z, ctx)?;
    let targets = batch.x.narrow(1, span.start, span.length)?;
    let rec = mean_target_log_prob(&log_probs, &targets)?;
    let base = model.prior_base_params(&batch.x_prior, span, ctx)?;
    let kl = kl_estimate(model, &q, &z, &base)?.mean_all()?;
    let total = ((kl.clone() * beta)? - &rec)?;
    let out = LossBreakdown { rec: scalar(&rec)?, kl: scalar(&kl)?, total: scalar(&total)?, beta };
    if !out.is_finite() {
        return Err(ClsmError::Numerical(format!("non-finite loss {out:?}")));
    }
    Ok((total, out))
}

/// A model trainable by [`fit`].
pub trait Objective {
    fn store(&self) -> &ParamStore;

    /// Loss on `windows` with KL weight `weight`. Any randomness (target
    /// spans, latent noise) must come from `rng`.
    fn batch_loss(&self, windows: &[&[Token]], weight: f64, rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<(Tensor, LossBreakdown)>;

    /// Final KL weight for this objective.
    fn weight_max(&self, cfg: &TrainConfig) -> f64 {
        cfg.beta_max
    }
}

impl Objective for Clsm {
    fn store(&self) -> &ParamStore {
        Clsm::store(self)
    }

    fn batch_loss(&self, windows: &[&[Token]], weight: f64, rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<(Tensor, LossBreakdown)> {
        let span = self.config().grid().sample(rng);
        let batch = Batch::new(windows, span, self.device())?;
        let eps = normal_noise(rng, (batch.size(), self.config().d_z), self.dtype(), self.device())?;
        compute_loss(self, &batch, weight, &eps, ctx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub rec: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Validation loss at the end of an epoch; epoch 0 is the untrained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose validation total was lowest (0 means no improvement).
    pub best_epoch: usize,
    pub best: Vec<(String, Tensor)>,
    /// Set when training stopped on a non-finite loss or gradient. Such steps
    /// are never applied, so the model keeps its last finite parameters (or
    /// the best snapshot if validation itself diverged).
    pub diverged: Option<String>,
}

/// Mean validation loss at the final KL weight, evaluated deterministically.
pub fn evaluate<O: Objective + ?Sized>(model: &O, windows: &[&[Token]], cfg: &TrainConfig, seed: u64) -> Result<LossBreakdown> {
    if windows.is_empty() {
        return Err(ClsmError::InsufficientData("validation split is empty".into()));
    }
    let weight = model.weight_max(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = Ctx::eval();
    let (mut rec, mut kl, mut total) = (0.0, 0.0, 0.0);
    for chunk in windows.chunks(cfg.batch) {
        let (_, b) = model.batch_loss(chunk, weight, &mut rng, &ctx)?;
        let w = chunk.len() as f64 / windows.len() as f64;
        rec += w * b.rec;
        kl += w * b.kl;
        total += w * b.total;
    }
    Ok(LossBreakdown { rec, kl, total, beta: weight })
}

fn grad_norm(store: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for var in store.vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(sq.sqrt())
}

/// Adam over shuffled mini-batches with linear KL annealing, gradient
/// clipping and per-epoch validation. Reproducible for a fixed seed.
pub fn fit<O: Objective + ?Sized>(
    model: &O,
    train: &[&[Token]],
    val: &[&[Token]],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ClsmError::InsufficientData("training split is empty".into()));
    }
    let store = model.store();
    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW { lr: cfg.lr, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: 1e-8, weight_decay: 0.0 },
    )?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let anneal_steps = ((cfg.anneal_epochs * steps_per_epoch as f64).round() as i64).max(1);
    let weight_max = model.weight_max(cfg);
    let val_seed = cfg.seed ^ 0x5eed_0f_7a1;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first = evaluate(model, val, cfg, val_seed)?;
    let mut epochs = vec![EpochRecord { epoch: 0, val: first }];
    let mut best = (0, first.total, store.snapshot()?);
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    let mut diverged = None;

    'outer: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch) {
            let windows: Vec<&[Token]> = idx.iter().map(|&i| train[i]).collect();
            let beta = beta_schedule(step, anneal_steps, weight_max)?;
            let ctx = Ctx::train(cfg.seed.wrapping_add(step).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let (loss, parts) = match model.batch_loss(&windows, beta, &mut rng, &ctx) {
                Ok(v) => v,
                Err(ClsmError::Numerical(msg)) => {
                    diverged = Some(format!("step {step}: {msg}"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let mut grads = loss.backward()?;
            let norm = grad_norm(store, &grads)?;
            if !norm.is_finite() {
                diverged = Some(format!("step {step}: non-finite gradient norm"));
                break 'outer;
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let scale = cfg.grad_clip / norm;
                for var in store.vars() {
                    if let Some(g) = grads.remove(var.as_tensor()) {
                        grads.insert(var.as_tensor(), (g * scale)?);
                    }
                }
            }
            opt.step(&grads)?;
            let rec = StepRecord {
                step,
                epoch,
                rec: parts.rec,
                kl: parts.kl,
                beta,
                total: parts.total,
                grad_norm: norm,
            };
            on_step(&rec);
            steps.push(rec);
            step += 1;
        }
        let v = evaluate(model, val, cfg, val_seed)?;
        if !v.is_finite() {
            diverged = Some(format!("epoch {epoch}: non-finite validation loss"));
            store.restore(&best.2)?;
            break;
        }
        if v.total < best.1 {
            best = (epoch, v.total, store.snapshot()?);
        }
        epochs.push(EpochRecord { epoch, val: v });
    }
    Ok(FitReport { steps, epochs, best_epoch: best.0, best: best.2, diverged })
}
