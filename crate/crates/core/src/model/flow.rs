//! Unconditional affine-coupling flow `f: Z -> W`.
//!
//! Each layer keeps one half of the dimensions fixed and maps the other half
//! as `b' = b * exp(s(a)) + t(a)`, where `s` ends in `tanh`. Layers alternate
//! which half is transformed. The final linear layers of `s` and `t` start at
//! zero, so a freshly built flow is the identity.

use candle_core::{Tensor, D};

use crate::error::{ClsmError, Result};
use crate::nn::layers::leaky_relu;
use crate::nn::{Linear, ParamStore};

#[derive(Clone, Debug)]
pub struct CouplingMlp {
    layers: [Linear; 3],
    slope: f64,
    tanh_out: bool,
}

impl CouplingMlp {
    fn new(store: &ParamStore, input: usize, hidden: usize, output: usize, slope: f64, tanh_out: bool) -> Result<Self> {
        Ok(Self {
            layers: [
                Linear::new(&store.pp("0"), input, hidden)?,
                Linear::new(&store.pp("1"), hidden, hidden)?,
                Linear::zeros(&store.pp("2"), hidden, output)?,
            ],
            slope,
            tanh_out,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.layers[0].forward(xs)?, self.slope)?;
        let h = leaky_relu(&self.layers[1].forward(&h)?, self.slope)?;
        let out = self.layers[2].forward(&h)?;
        if self.tanh_out {
            Ok(out.tanh()?)
        } else {
            Ok(out)
        }
    }
}

#[derive(Clone, Debug)]
pub struct CouplingLayer {
    scale: CouplingMlp,
    shift: CouplingMlp,
    /// Transform the first half (conditioned on the second) instead of the reverse.
    transform_first: bool,
    half: usize,
}

impl CouplingLayer {
    pub fn new(store: &ParamStore, d_z: usize, hidden: usize, slope: f64, transform_first: bool) -> Result<Self> {
        let half = d_z / 2;
        Ok(Self {
            scale: CouplingMlp::new(&store.pp("scale"), half, hidden, half, slope, true)?,
            shift: CouplingMlp::new(&store.pp("shift"), half, hidden, half, slope, false)?,
            transform_first,
            half,
        })
    }

    /// (conditioner, transformed)
    fn split(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let a = x.narrow(D::Minus1, 0, self.half)?;
        let b = x.narrow(D::Minus1, self.half, self.half)?;
        Ok(if self.transform_first { (b, a) } else { (a, b) })
    }

    fn join(&self, cond: &Tensor, out: &Tensor) -> Result<Tensor> {
        let parts = if self.transform_first { [out, cond] } else { [cond, out] };
        Ok(Tensor::cat(&parts, D::Minus1)?)
    }

    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (cond, x) = self.split(z)?;
        let s = self.scale.forward(&cond)?;
        let t = self.shift.forward(&cond)?;
        let y = (x.mul(&s.exp()?)? + t)?;
        Ok((self.join(&cond, &y)?, s.sum(D::Minus1)?))
    }

    pub fn inverse(&self, w: &Tensor) -> Result<Tensor> {
        let (cond, y) = self.split(w)?;
        let s = self.scale.forward(&cond)?;
        let t = self.shift.forward(&cond)?;
        let x = (y - t)?.mul(&s.neg()?.exp()?)?;
        self.join(&cond, &x)
    }
}

#[derive(Clone, Debug)]
pub struct FlowStack {
    layers: Vec<CouplingLayer>,
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ClsmError::Numerical(format!("non-finite {what}")))
    }
}

impl FlowStack {
    pub fn new(store: &ParamStore, d_z: usize, n_layers: usize, hidden: usize, slope: f64) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| CouplingLayer::new(&store.pp(i), d_z, hidden, slope, i % 2 == 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// `z: (B, d_z)` -> `(w, log|det dw/dz|)` with `log_det: (B,)`.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut w = z.clone();
        let mut log_det = z.sum(D::Minus1)?.zeros_like()?;
        for layer in &self.layers {
            let (next, ld) = layer.forward(&w)?;
            w = next;
            log_det = (log_det + ld)?;
        }
        Ok((w, log_det))
    }

    pub fn inverse(&self, w: &Tensor) -> Result<Tensor> {
        let mut z = w.clone();
        for layer in self.layers.iter().rev() {
            z = layer.inverse(&z)?;
        }
        Ok(z)
    }

    /// [`Self::forward`] rejecting non-finite inputs.
    pub fn forward_checked(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        ensure_finite(z, "flow input")?;
        self.forward(z)
    }

    pub fn inverse_checked(&self, w: &Tensor) -> Result<Tensor> {
        ensure_finite(w, "flow input")?;
        self.inverse(w)
    }
}
