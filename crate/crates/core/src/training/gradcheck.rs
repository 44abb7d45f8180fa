use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{compute_loss, normal_noise, scalar, Batch};
use crate::error::{ClsmError, Result};
use crate::model::Clsm;
use crate::nn::Ctx;

/// Gradients smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    /// Entries whose relative error exceeds `tol`.
    pub fn failures(&self, tol: f64) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !(e.rel_err < tol)).collect()
    }
}

fn set_element(var: &candle_core::Var, flat: &[f64], index: usize, value: f64) -> Result<()> {
    let mut v = flat.to_vec();
    v[index] = value;
    var.set(&Tensor::from_vec(v, var.shape(), var.device())?)?;
    Ok(())
}

/// Compare backprop against central finite differences of the total loss for
/// `n_params` randomly chosen scalar parameters. The model must be f64; the
/// loss is evaluated in eval mode with fixed latent noise so it is a
/// deterministic function of the parameters.
pub fn gradient_check(
    model: &Clsm,
    batch: &Batch,
    beta: f64,
    n_params: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if model.dtype() != DType::F64 {
        return Err(ClsmError::InvalidConfig("gradient check needs an f64 model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = normal_noise(&mut rng, (batch.size(), model.config().d_z), DType::F64, model.device())?;
    let ctx = Ctx::eval();
    let loss = |_: ()| -> Result<f64> { Ok(compute_loss(model, batch, beta, &eps, &ctx)?.1.total) };

    let (total, _) = compute_loss(model, batch, beta, &eps, &ctx)?;
    let grads = total.backward()?;
    let vars = model.store().named_vars();
    let sizes: Vec<usize> = vars.iter().map(|(_, v)| v.elem_count()).collect();
    let count: usize = sizes.iter().sum();

    let mut entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        // uniform over scalar parameters, not over tensors
        let mut k = rng.random_range(0..count);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let (name, var) = &vars[which];
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[k],
            None => 0.0,
        };
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let x0 = original[k];
        set_element(var, &original, k, x0 + step)?;
        let up = loss(());
        set_element(var, &original, k, x0 - step)?;
        let down = loss(());
        set_element(var, &original, k, x0)?;
        let numeric = (up? - down?) / (2.0 * step);
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        entries.push(GradCheckEntry { param: name.clone(), index: k, analytic, numeric, rel_err });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    // sanity: the restored parameters reproduce the original loss
    let again = scalar(&compute_loss(model, batch, beta, &eps, &ctx)?.0)?;
    if again != scalar(&total)? {
        return Err(ClsmError::Numerical("parameters not restored after gradient check".into()));
    }
    Ok(GradCheckReport { step, entries, max_rel_err })
}
