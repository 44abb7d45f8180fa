use candle_core::{Tensor, D};

use super::layers::{sigmoid, Ctx, Linear};
use super::params::ParamStore;
use crate::error::Result;

/// One LSTM layer (gate order i, f, g, o).
#[derive(Clone, Debug)]
pub struct LstmCell {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl LstmCell {
    pub fn new(store: &ParamStore, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(&store.pp("ih"), in_dim, 4 * hidden)?,
            recurrent: Linear::no_bias(&store.pp("hh"), hidden, 4 * hidden)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Pre-compute input projections for the whole sequence: (B, T, 4H).
    pub fn project(&self, xs: &Tensor) -> Result<Tensor> {
        self.input.forward(xs)
    }

    /// One step from a projected input `(B, 4H)`.
    pub fn step(&self, projected: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let gates = (projected + self.recurrent.forward(h)?)?;
        let chunks = gates.chunk(4, D::Minus1)?;
        let i = sigmoid(&chunks[0])?;
        let f = sigmoid(&chunks[1])?;
        let g = chunks[2].tanh()?;
        let o = sigmoid(&chunks[3])?;
        let c = ((f * c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h, c))
    }

    /// Run over `xs: (B, T, in)`; returns outputs `(B, T, H)` in input order
    /// plus the final `(h, c)`.
    pub fn run(
        &self,
        xs: &Tensor,
        init: Option<(Tensor, Tensor)>,
        reverse: bool,
    ) -> Result<(Tensor, (Tensor, Tensor))> {
        let (b, t, _) = xs.dims3()?;
        let projected = self.project(xs)?;
        let (mut h, mut c) = match init {
            Some(s) => s,
            None => {
                let z = Tensor::zeros((b, self.hidden), xs.dtype(), xs.device())?;
                (z.clone(), z)
            }
        };
        let mut outs = Vec::with_capacity(t);
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let p = projected.narrow(1, step, 1)?.squeeze(1)?;
            (h, c) = self.step(&p, &h, &c)?;
            outs.push(h.clone());
        }
        if reverse {
            outs.reverse();
        }
        Ok((Tensor::stack(&outs, 1)?, (h, c)))
    }
}

/// Stacked bidirectional LSTM. Each layer after the first consumes the
/// concatenated forward/backward outputs of the previous one.
#[derive(Clone, Debug)]
pub struct BiLstm {
    layers: Vec<(LstmCell, LstmCell)>,
    dropout: f64,
}

impl BiLstm {
    pub fn new(store: &ParamStore, in_dim: usize, hidden: usize, n_layers: usize, dropout: f64) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let d = if l == 0 { in_dim } else { 2 * hidden };
            let s = store.pp(l);
            layers.push((LstmCell::new(&s.pp("fwd"), d, hidden)?, LstmCell::new(&s.pp("bwd"), d, hidden)?));
        }
        Ok(Self { layers, dropout })
    }

    /// Returns `(h_l, h_r)`: the last output of the forward direction (after
    /// the final step) and of the backward direction (after the first step).
    pub fn forward(&self, xs: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let mut input = xs.clone();
        let mut last = None;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 {
                input = ctx.dropout(&input, self.dropout)?;
            }
            let (out_f, (h_f, _)) = fwd.run(&input, None, false)?;
            let (out_b, (h_b, _)) = bwd.run(&input, None, true)?;
            input = Tensor::cat(&[&out_f, &out_b], D::Minus1)?;
            last = Some((h_f, h_b));
        }
        Ok(last.expect("at least one layer"))
    }
}

/// Stacked unidirectional LSTM with explicit state, for autoregressive decoding.
#[derive(Clone, Debug)]
pub struct Lstm {
    layers: Vec<LstmCell>,
    dropout: f64,
}

pub type LstmState = Vec<(Tensor, Tensor)>;

impl Lstm {
    pub fn new(store: &ParamStore, in_dim: usize, hidden: usize, n_layers: usize, dropout: f64) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| LstmCell::new(&store.pp(l), if l == 0 { in_dim } else { hidden }, hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, dropout })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// `xs: (B, T, in)` -> outputs of the top layer `(B, T, H)` and final states.
    pub fn forward(&self, xs: &Tensor, init: LstmState, ctx: &Ctx) -> Result<(Tensor, LstmState)> {
        let mut input = xs.clone();
        let mut finals = Vec::with_capacity(self.layers.len());
        for (l, (cell, state)) in self.layers.iter().zip(init).enumerate() {
            if l > 0 {
                input = ctx.dropout(&input, self.dropout)?;
            }
            let (out, fin) = cell.run(&input, Some(state), false)?;
            input = out;
            finals.push(fin);
        }
        Ok((input, finals))
    }
}
