//! Posterior encoder, context-conditional flow prior and masked decoder.

pub mod clsm;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod flow;
pub mod gaussian;
pub mod mask;

pub use clsm::{ids_tensor, mask_targets, Clsm};
pub use config::ModelConfig;
pub use decoder::Decoder;
pub use encoder::ContextEncoder;
pub use flow::{CouplingLayer, FlowStack};
pub use gaussian::GaussianParams;
pub use mask::{build_decoder_mask, AttentionMask};
