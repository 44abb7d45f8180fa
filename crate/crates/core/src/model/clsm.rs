use candle_core::{DType, Device, Tensor};

use super::config::ModelConfig;
use super::decoder::Decoder;
use super::encoder::ContextEncoder;
use super::flow::FlowStack;
use super::gaussian::GaussianParams;
use crate::context::Context;
use crate::error::{ClsmError, Result};
use crate::nn::{Ctx, ParamStore};
use crate::span::TargetSpan;
use crate::tokens::{to_indices, Token};

/// Stack token sequences of equal length into a `(B, K)` index tensor.
pub fn ids_tensor<S: AsRef<[Token]>>(seqs: &[S], device: &Device) -> Result<Tensor> {
    let k = seqs.first().map(|s| s.as_ref().len()).unwrap_or(0);
    if seqs.is_empty() || k == 0 {
        return Err(ClsmError::InvalidInput("empty batch".into()));
    }
    let mut flat = Vec::with_capacity(seqs.len() * k);
    for s in seqs {
        let s = s.as_ref();
        if s.len() != k {
            return Err(ClsmError::InvalidInput(format!("ragged batch: {} vs {k}", s.len())));
        }
        flat.extend(to_indices(s));
    }
    Ok(Tensor::from_vec(flat, (seqs.len(), k), device)?)
}

/// Copy of each window with the target positions replaced by `p`.
pub fn mask_targets<S: AsRef<[Token]>>(seqs: &[S], span: &TargetSpan) -> Vec<Vec<Token>> {
    seqs.iter()
        .map(|s| {
            let mut v = s.as_ref().to_vec();
            for t in &mut v[span.start..span.end()] {
                *t = Token::CONSTRAINT;
            }
            v
        })
        .collect()
}

/// Posterior encoder, context-conditional prior (Gaussian base plus flow) and
/// masked decoder, sharing one parameter store.
#[derive(Clone)]
pub struct Clsm {
    cfg: ModelConfig,
    store: ParamStore,
    posterior: ContextEncoder,
    prior: ContextEncoder,
    flow: FlowStack,
    decoder: Decoder,
}

impl Clsm {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype, device);
        Ok(Self {
            posterior: ContextEncoder::new(&store.pp("posterior"), &cfg)?,
            prior: ContextEncoder::new(&store.pp("prior"), &cfg)?,
            flow: FlowStack::new(
                &store.pp("flow"),
                cfg.d_z,
                cfg.n_coupling_layers,
                cfg.coupling_mlp_hidden,
                cfg.leaky_slope,
            )?,
            decoder: Decoder::new(&store.pp("decoder"), &cfg)?,
            cfg,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn flow(&self) -> &FlowStack {
        &self.flow
    }

    /// q(z | x, tau) for a batch of full windows `x: (B, K)`.
    pub fn encode_posterior(&self, x: &Tensor, span: &TargetSpan, ctx: &Ctx) -> Result<GaussianParams> {
        self.posterior.forward(x, span, ctx)
    }

    /// Base Gaussian over W. `x_prior: (B, K)` must carry `p` at every target
    /// position, so the target content cannot reach the prior.
    pub fn prior_base_params(&self, x_prior: &Tensor, span: &TargetSpan, ctx: &Ctx) -> Result<GaussianParams> {
        self.prior.forward(x_prior, span, ctx)
    }

    /// Prior base for a single context.
    pub fn prior_base_for(&self, context: &Context, ctx: &Ctx) -> Result<GaussianParams> {
        if context.window_len() != self.cfg.seq_len {
            return Err(ClsmError::InvalidSpan(format!(
                "context describes a window of {}, model expects {}",
                context.window_len(),
                self.cfg.seq_len
            )));
        }
        let ids = ids_tensor(&[context.prior_input()], self.device())?;
        self.prior_base_params(&ids, &context.span, ctx)
    }

    /// `z -> (w, log|det dw/dz|)`.
    pub fn flow_forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.flow.forward_checked(z)
    }

    pub fn flow_inverse(&self, w: &Tensor) -> Result<Tensor> {
        self.flow.inverse_checked(w)
    }

    /// `log p(z | x_C, tau) = log N(f(z); base) + log|det df/dz|`, shape `(B,)`.
    pub fn prior_log_density(&self, z: &Tensor, base: &GaussianParams) -> Result<Tensor> {
        let (w, log_det) = self.flow.forward(z)?;
        Ok((base.log_density(&w)? + log_det)?)
    }

    /// Decoder scores `(B, span.length, 32)`.
    pub fn decode_logits(&self, x_teacher: &Tensor, span: &TargetSpan, z: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.decoder.logits(x_teacher, span, z, ctx)
    }

    /// Decoder states at all `K + 1` positions (start symbol first).
    pub fn decode_hidden(&self, x_teacher: &Tensor, span: &TargetSpan, z: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.decoder.hidden(x_teacher, span, z, ctx)
    }

    pub fn decode_log_probs(&self, x_teacher: &Tensor, span: &TargetSpan, z: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.decoder.log_probs(x_teacher, span, z, ctx)
    }
}

impl std::fmt::Debug for Clsm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Clsm")
            .field("cfg", &self.cfg)
            .field("params", &self.store.num_params())
            .finish()
    }
}
