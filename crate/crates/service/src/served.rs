//! A loaded checkpoint that can fill target spans.

use std::path::Path;

use anyhow::{bail, Context as _};
use candle_core::Device;
use clsm_core::baseline_vae::Vae;
use clsm_core::checkpoint::{self, LoadedModel, ModelKind};
use clsm_core::model::Clsm;
use clsm_core::sampler::ContextualModel;
use clsm_core::{SpanGrid, TargetSpan};

#[derive(Clone, Debug)]
pub enum ServedModel {
    Clsm(Clsm),
    Vae(Vae),
}

impl ServedModel {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let loaded = checkpoint::load(path, &Device::Cpu).with_context(|| format!("loading {}", path.display()))?;
        match loaded {
            LoadedModel::Clsm(m) => Ok(Self::Clsm(m)),
            LoadedModel::Vae(m) => Ok(Self::Vae(m)),
            LoadedModel::Lm(_) => bail!("{} holds a language model, which cannot generate", path.display()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Clsm(_) => ModelKind::Clsm,
            Self::Vae(_) => ModelKind::Vae,
        }
    }

    pub fn model(&self) -> &(dyn ContextualModel + Send + Sync) {
        match self {
            Self::Clsm(m) => m,
            Self::Vae(m) => m,
        }
    }

    /// Spans this model accepts. The VAE uses the default bar layout over its
    /// own window length.
    pub fn grid(&self) -> SpanGrid {
        match self {
            Self::Clsm(m) => m.config().grid(),
            Self::Vae(m) => SpanGrid { window: m.config().seq_len, ..SpanGrid::default() },
        }
    }

    pub fn check_span(&self, span: TargetSpan) -> clsm_core::Result<TargetSpan> {
        TargetSpan::on_grid(span.start, span.length, &self.grid())
    }
}

/// Parse a model kind name as used by `--model`.
pub fn parse_kind(s: &str) -> Result<ModelKind, String> {
    match s {
        "clsm" => Ok(ModelKind::Clsm),
        "vae" => Ok(ModelKind::Vae),
        "lm" => Ok(ModelKind::Lm),
        other => Err(format!("unknown model kind {other:?} (expected clsm, vae or lm)")),
    }
}
