use std::cell::RefCell;

use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamStore};
use crate::error::Result;

/// Forward-pass mode. Training mode carries the RNG that drives dropout;
/// evaluation mode is fully deterministic.
pub struct Ctx {
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self { rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&self, xs: &Tensor, p: f64) -> Result<Tensor> {
        let Some(rng) = &self.rng else {
            return Ok(xs.clone());
        };
        if p <= 0.0 {
            return Ok(xs.clone());
        }
        let keep = 1.0 - p;
        let mut rng = rng.borrow_mut();
        let mask: Vec<f64> = (0..xs.elem_count())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, xs.shape(), xs.device())?.to_dtype(xs.dtype())?;
        Ok(xs.mul(&mask)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// PyTorch-style uniform init with bound `1/sqrt(in_dim)`.
    pub fn new(store: &ParamStore, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: store.get((out_dim, in_dim), "weight", Init::Uniform(bound))?,
            bias: Some(store.get(out_dim, "bias", Init::Uniform(bound))?),
        })
    }

    pub fn no_bias(store: &ParamStore, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: store.get((out_dim, in_dim), "weight", Init::Uniform(bound))?,
            bias: None,
        })
    }

    /// All-zero weights and bias: the layer starts out emitting zeros.
    pub fn zeros(store: &ParamStore, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.get((out_dim, in_dim), "weight", Init::Zeros)?,
            bias: Some(store.get(out_dim, "bias", Init::Zeros)?),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0).expect("rank-2 weight")
    }

    /// Applies to the last dimension of an input of any rank >= 1.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let dims = xs.dims().to_vec();
        let in_dim = *dims.last().expect("rank >= 1");
        let rows = xs.elem_count() / in_dim.max(1);
        let flat = xs.reshape((rows, in_dim))?;
        let mut out = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            out = out.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(out.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: Tensor,
    dim: usize,
}

impl Embedding {
    pub fn new(store: &ParamStore, n: usize, dim: usize, std: f64) -> Result<Self> {
        Ok(Self { table: store.get((n, dim), "table", Init::Normal(std))?, dim })
    }

    /// `ids`: u32 tensor of any shape; output appends the embedding dim.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let out = self.table.index_select(&flat, 0)?;
        dims.push(self.dim);
        Ok(out.reshape(dims)?)
    }

    /// The first `n` rows, e.g. positional embeddings for a length-`n` sequence.
    pub fn rows(&self, n: usize) -> Result<Tensor> {
        Ok(self.table.narrow(0, 0, n)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.get(dim, "gamma", Init::Const(1.0))?,
            beta: store.get(dim, "beta", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let n = xs.dim(D::Minus1)? as f64;
        let mean = (xs.sum_keepdim(D::Minus1)? / n)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / n)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

/// SELU built from `exp(min(x, 0))` so large positive inputs never overflow
/// in either pass.
pub fn selu(xs: &Tensor) -> Result<Tensor> {
    let zeros = xs.zeros_like()?;
    let pos = xs.maximum(&zeros)?;
    let neg = ((xs.minimum(&zeros)?.exp()? - 1.0)? * SELU_ALPHA)?;
    Ok(((pos + neg)? * SELU_SCALE)?)
}

pub fn leaky_relu(xs: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(xs, slope)?)
}

pub fn sigmoid(xs: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(xs)?)
}

/// Two linear layers with a SELU between them.
#[derive(Clone, Debug)]
pub struct SeluMlp {
    first: Linear,
    second: Linear,
}

impl SeluMlp {
    pub fn new(store: &ParamStore, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(Self {
            first: Linear::new(&store.pp("0"), input, hidden)?,
            second: Linear::new(&store.pp("1"), hidden, output)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.second.forward(&selu(&self.first.forward(xs)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn linear_handles_rank3() {
        let s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let l = Linear::new(&s, 4, 3).unwrap();
        let x = Tensor::ones((2, 5, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[2, 5, 3]);
    }

    #[test]
    fn layer_norm_normalizes() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let ln = LayerNorm::new(&s, 4).unwrap();
        let x = Tensor::new(&[[1f64, 2., 3., 4.]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn selu_matches_definition() {
        let x = Tensor::new(&[-2f64, -0.5, 0.0, 0.7, 800.0], &Device::Cpu).unwrap();
        let y = selu(&x).unwrap().to_vec1::<f64>().unwrap();
        let oracle = |v: f64| {
            if v > 0.0 {
                SELU_SCALE * v
            } else {
                SELU_SCALE * SELU_ALPHA * (v.exp() - 1.0)
            }
        };
        for (a, v) in y.iter().zip([-2f64, -0.5, 0.0, 0.7, 800.0]) {
            assert!((a - oracle(v)).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let x = Tensor::ones((100,), DType::F32, &Device::Cpu).unwrap();
        let eval = Ctx::eval().dropout(&x, 0.5).unwrap();
        assert_eq!(eval.to_vec1::<f32>().unwrap(), vec![1.0; 100]);
        let train = Ctx::train(1).dropout(&x, 0.5).unwrap().to_vec1::<f32>().unwrap();
        assert!(train.iter().any(|&v| v == 0.0));
        assert!(train.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
