use std::f64::consts::{LN_2, PI};

use candle_core::{Tensor, D};

use crate::error::Result;

/// Diagonal Gaussian with variance `0.5 * exp(log_v)`, batched as `(B, d)`.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub log_v: Tensor,
}

impl GaussianParams {
    pub fn new(mean: Tensor, log_v: Tensor) -> Self {
        Self { mean, log_v }
    }

    /// N(0, I) under the `0.5 * exp(.)` convention, i.e. `log_v = ln 2`.
    pub fn standard(like: &Tensor) -> Result<Self> {
        Ok(Self { mean: like.zeros_like()?, log_v: (like.ones_like()? * LN_2)? })
    }

    pub fn variance(&self) -> Result<Tensor> {
        Ok((self.log_v.exp()? * 0.5)?)
    }

    pub fn log_variance(&self) -> Result<Tensor> {
        Ok((&self.log_v - LN_2)?)
    }

    pub fn std(&self) -> Result<Tensor> {
        Ok(self.variance()?.sqrt()?)
    }

    /// Reparameterized draw `mean + std * eps`.
    pub fn sample(&self, eps: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + self.std()?.mul(eps)?)?)
    }

    /// Row-wise log density, shape `(B,)`.
    pub fn log_density(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)? as f64;
        let log_var = self.log_variance()?;
        let sq = (x - &self.mean)?.sqr()?.div(&log_var.exp()?)?;
        let s = (sq + log_var)?.sum(D::Minus1)?;
        Ok(((s + d * (2.0 * PI).ln())? * -0.5)?)
    }

    pub fn is_finite(&self) -> Result<bool> {
        let v = self.variance()?.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        let m = self.mean.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        Ok(v.iter().all(|x| x.is_finite() && *x > 0.0) && m.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn standard_normal_at_mode() {
        let z = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let g = GaussianParams::standard(&z).unwrap();
        let lp = g.log_density(&z).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((lp - -1.8379).abs() < 1e-4);
    }

    #[test]
    fn matches_scalar_formula() {
        let x = Tensor::new(&[[0.3f64, -1.2]], &Device::Cpu).unwrap();
        let g = GaussianParams::new(
            Tensor::new(&[[0.1f64, 0.5]], &Device::Cpu).unwrap(),
            Tensor::new(&[[0.2f64, -0.7]], &Device::Cpu).unwrap(),
        );
        let got = g.log_density(&x).unwrap().to_vec1::<f64>().unwrap()[0];
        let mut want = 0.0;
        for (xi, (m, lv)) in [0.3f64, -1.2].iter().zip([(0.1f64, 0.2f64), (0.5, -0.7)]) {
            let var = 0.5 * lv.exp();
            want += -0.5 * ((2.0 * PI * var).ln() + (xi - m).powi(2) / var);
        }
        assert!((got - want).abs() < 1e-12);
    }
}
