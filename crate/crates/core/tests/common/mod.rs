#![allow(dead_code)]

use candle_core::Tensor;
use clsm_core::nn::ParamStore;
use clsm_core::tokens::DATA_VOCAB;
use clsm_core::Token;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_window(rng: &mut ChaCha8Rng, k: usize) -> Vec<Token> {
    (0..k).map(|_| Token::from_index(rng.random_range(0..DATA_VOCAB)).unwrap()).collect()
}

/// Overwrite a named parameter with zeros.
pub fn zero_param(store: &ParamStore, name: &str) {
    let v = store.var(name).unwrap_or_else(|| panic!("no parameter {name}"));
    v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
        .iter()
        .map(|x| x.to_bits())
        .collect()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}
