//! Contextual latent space model (CLSM) for symbolic-music infilling.
//!
//! Given the left and right context of an 8-bar monophonic melody, a
//! context-conditioned prior (Gaussian base + affine-coupling flow) defines a
//! latent space from which target bars are decoded, interpolated and varied.

pub mod baseline_vae;
pub mod checkpoint;
pub mod context;
pub mod corpus;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod settings;
pub mod span;
pub mod tokens;
pub mod training;

pub use context::Context;
pub use error::{ClsmError, Result};
pub use span::{SpanGrid, TargetSpan};
pub use tokens::{Token, TokenAlphabet, TokenSeq};
