//! Multi-head attention with learned relative-position logits, and the
//! transformer blocks built from it.
//!
//! Relative logits follow the Music Transformer formulation
//! `S_rel[i, j] = q_i . E[j - i]` with one embedding table per head covering
//! distances `-(L-1)..=(L-1)`. The table is gathered explicitly rather than
//! "skewed", because encoder attention is bidirectional.

use candle_core::{Tensor, D};

use super::layers::{Ctx, LayerNorm, Linear};
use super::params::{Init, ParamStore};
use crate::error::Result;

/// Additive mask value; large enough that `exp` underflows to exactly zero.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
    /// `(heads, 2 * max_len - 1, head_dim)`; `None` for content-only attention.
    relative: Option<Tensor>,
    max_len: usize,
}

impl MultiHeadAttention {
    /// `kv_dim` is the width of the attended sequence (differs from `dim` for
    /// cross-attention). `max_len > 0` enables relative logits.
    pub fn new(store: &ParamStore, dim: usize, kv_dim: usize, heads: usize, max_len: usize) -> Result<Self> {
        assert!(dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        let head_dim = dim / heads;
        let relative = if max_len > 0 {
            Some(store.get(
                (heads, 2 * max_len - 1, head_dim),
                "relative",
                Init::Normal(1.0 / (head_dim as f64).sqrt()),
            )?)
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&store.pp("q"), dim, dim)?,
            k: Linear::new(&store.pp("k"), kv_dim, dim)?,
            v: Linear::new(&store.pp("v"), kv_dim, dim)?,
            o: Linear::new(&store.pp("o"), dim, dim)?,
            heads,
            head_dim,
            relative,
            max_len,
        })
    }

    fn split_heads(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, l, _) = xs.dims3()?;
        Ok(xs
            .reshape((b, l, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `q: (B, H, L, Dh)` -> `(B, H, L, L)` relative logits.
    fn relative_logits(&self, table: &Tensor, q: &Tensor) -> Result<Tensor> {
        let (b, h, l, dh) = q.dims4()?;
        assert!(l <= self.max_len, "sequence of {l} exceeds relative range {}", self.max_len);
        let offset = self.max_len - 1;
        let idx: Vec<u32> = (0..l)
            .flat_map(|i| (0..l).map(move |j| (j + offset - i) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, l * l, q.device())?;
        // (H, L*L, Dh) -> (H*L, L, Dh): row block (h, i) holds E[j - i] for all j
        let gathered = table.index_select(&idx, 1)?.reshape((h * l, l, dh))?;
        let qr = q.permute((1, 2, 0, 3))?.contiguous()?.reshape((h * l, b, dh))?;
        let s = qr.matmul(&gathered.transpose(1, 2)?.contiguous()?)?;
        Ok(s.reshape((h, l, b, l))?.permute((2, 0, 1, 3))?.contiguous()?)
    }

    /// `xs: (B, Lq, dim)`, `kv: (B, Lk, kv_dim)`; `bias: (Lq, Lk)` additive mask.
    pub fn forward(&self, xs: &Tensor, kv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, dim) = xs.dims3()?;
        let q = self.split_heads(&self.q.forward(xs)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let mut scores = q.matmul(&k.transpose(2, 3)?.contiguous()?)?;
        if let Some(table) = &self.relative {
            scores = (scores + self.relative_logits(table, &q)?)?;
        }
        scores = (scores / (self.head_dim as f64).sqrt())?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, dim))?;
        self.o.forward(&out)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &ParamStore, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&store.pp("up"), dim, hidden)?,
            down: Linear::new(&store.pp("down"), hidden, dim)?,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(xs)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct TransformerLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

/// Shape of a transformer stack.
#[derive(Clone, Copy, Debug)]
pub struct StackConfig {
    pub dim: usize,
    pub ff_hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Longest sequence for relative attention; 0 disables relative logits.
    pub relative_len: usize,
    /// Width of the cross-attended memory; `None` builds encoder-only layers.
    pub memory_dim: Option<usize>,
}

/// Pre-norm transformer layers with a final LayerNorm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    dropout: f64,
}

impl TransformerStack {
    pub fn new(store: &ParamStore, cfg: StackConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let s = store.pp(l);
            let cross = match cfg.memory_dim {
                Some(m) => Some((
                    LayerNorm::new(&s.pp("norm_cross"), cfg.dim)?,
                    MultiHeadAttention::new(&s.pp("cross_attn"), cfg.dim, m, cfg.heads, 0)?,
                )),
                None => None,
            };
            layers.push(TransformerLayer {
                norm_self: LayerNorm::new(&s.pp("norm_self"), cfg.dim)?,
                self_attn: MultiHeadAttention::new(&s.pp("self_attn"), cfg.dim, cfg.dim, cfg.heads, cfg.relative_len)?,
                cross,
                norm_ff: LayerNorm::new(&s.pp("norm_ff"), cfg.dim)?,
                ff: FeedForward::new(&s.pp("ff"), cfg.dim, cfg.ff_hidden)?,
            });
        }
        Ok(Self {
            layers,
            final_norm: LayerNorm::new(&store.pp("final_norm"), cfg.dim)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, xs: &Tensor, mask: Option<&Tensor>, memory: Option<&Tensor>, ctx: &Ctx) -> Result<Tensor> {
        let mut h = xs.clone();
        for layer in &self.layers {
            let n = layer.norm_self.forward(&h)?;
            h = (&h + ctx.dropout(&layer.self_attn.forward(&n, &n, mask)?, self.dropout)?)?;
            if let (Some((norm, attn)), Some(mem)) = (&layer.cross, memory) {
                let n = norm.forward(&h)?;
                h = (&h + ctx.dropout(&attn.forward(&n, mem, None)?, self.dropout)?)?;
            }
            let n = layer.norm_ff.forward(&h)?;
            h = (&h + ctx.dropout(&layer.ff.forward(&n)?, self.dropout)?)?;
        }
        self.final_norm.forward(&h)
    }
}

/// Additive bias tensor from a boolean `allow` matrix.
pub fn mask_bias(allow: &[Vec<bool>], dtype: candle_core::DType, device: &candle_core::Device) -> Result<Tensor> {
    let n = allow.len();
    let m = allow.first().map_or(0, Vec::len);
    let data: Vec<f64> = allow
        .iter()
        .flat_map(|row| row.iter().map(|&a| if a { 0.0 } else { MASKED }))
        .collect();
    Ok(Tensor::from_vec(data, (n, m), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, IndexOp};

    /// Direct O(L^2) evaluation of q_i . E[j - i].
    #[test]
    fn relative_logits_match_direct_sum() {
        let s = ParamStore::new(3, DType::F64, &Device::Cpu);
        let attn = MultiHeadAttention::new(&s, 8, 8, 2, 6).unwrap();
        let table = attn.relative.clone().unwrap();
        let q = Tensor::randn(0f64, 1.0, (2, 2, 5, 4), &Device::Cpu).unwrap();
        let got = attn.relative_logits(&table, &q).unwrap();
        for b in 0..2 {
            for h in 0..2 {
                for i in 0..5 {
                    for j in 0..5 {
                        let qi = q.i((b, h, i)).unwrap().to_vec1::<f64>().unwrap();
                        let e = table.i((h, j + 5 - i)).unwrap().to_vec1::<f64>().unwrap();
                        let want: f64 = qi.iter().zip(&e).map(|(a, b)| a * b).sum();
                        let g = got.i((b, h, i, j)).unwrap().to_scalar::<f64>().unwrap();
                        assert!((g - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn masked_keys_have_no_influence() {
        let s = ParamStore::new(4, DType::F32, &Device::Cpu);
        let attn = MultiHeadAttention::new(&s, 8, 8, 2, 4).unwrap();
        let allow = vec![
            vec![true, false, false, false],
            vec![true, true, false, false],
            vec![true, true, true, false],
            vec![true, true, true, true],
        ];
        let bias = mask_bias(&allow, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 4, 8), &Device::Cpu).unwrap();
        let y = attn.forward(&x, &x, Some(&bias)).unwrap();
        let x2 = x.slice_assign(&[0..1, 3..4, 0..8], &Tensor::ones((1, 1, 8), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let y2 = attn.forward(&x2, &x2, Some(&bias)).unwrap();
        let a = y.i((0, 0..3)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = y2.i((0, 0..3)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
