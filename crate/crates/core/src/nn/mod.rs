//! Small neural-network toolkit on top of candle tensors: a seeded parameter
//! store, basic layers, LSTMs and relative-attention transformer blocks.

pub mod attention;
pub mod layers;
pub mod lstm;
pub mod params;

pub use attention::{MultiHeadAttention, TransformerStack};
pub use layers::{Ctx, Embedding, LayerNorm, Linear};
pub use lstm::{BiLstm, Lstm};
pub use params::{Init, ParamStore};
