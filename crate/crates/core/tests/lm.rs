mod common;

use candle_core::{DType, Device};
use clsm_core::checkpoint::{load, save_lm, LoadedModel};
use clsm_core::lm::{lm_nll, EvalLm, LmConfig};
use clsm_core::model::ids_tensor;
use clsm_core::nn::Ctx;
use clsm_core::{ClsmError, Token};
use common::{bits, max_abs_diff, random_window, zero_param};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64, dtype: DType) -> EvalLm {
    let cfg = LmConfig { token_embed: 8, hidden: 8, heads: 2, layers: 1, dropout: 0.0, seq_len: 8 };
    EvalLm::new(cfg, seed, dtype, &Device::Cpu).unwrap()
}

#[test]
fn uniform_model_scores_log_32() {
    let lm = tiny(1, DType::F64);
    zero_param(lm.store(), "out.weight");
    zero_param(lm.store(), "out.bias");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w: Vec<_> = (0..5).map(|_| random_window(&mut rng, 8)).collect();
    assert!((lm_nll(&lm, &w).unwrap() - 32f64.ln()).abs() < 1e-12);
}

#[test]
fn predictions_never_see_the_future() {
    let lm = tiny(2, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let a = random_window(&mut rng, 8);
        let k = rng.random_range(0..8);
        let mut b = a.clone();
        for t in b.iter_mut().skip(k) {
            *t = random_window(&mut rng, 1)[0];
        }
        let la = lm.logits(&ids_tensor(&[a], &Device::Cpu).unwrap(), &Ctx::eval()).unwrap();
        let lb = lm.logits(&ids_tensor(&[b], &Device::Cpu).unwrap(), &Ctx::eval()).unwrap();
        // row k predicts token k from the tokens before it
        let (ra, rb) = (la.narrow(1, 0, k + 1).unwrap(), lb.narrow(1, 0, k + 1).unwrap());
        assert_eq!(bits(&ra), bits(&rb));
    }
}

#[test]
fn non_data_tokens_rejected() {
    let lm = tiny(3, DType::F32);
    let mut w = random_window(&mut ChaCha8Rng::seed_from_u64(3), 8);
    w[3] = Token::CONSTRAINT;
    assert!(matches!(lm_nll(&lm, &[w]), Err(ClsmError::InvalidToken(_))));
    let none: Vec<Vec<Token>> = Vec::new();
    assert!(matches!(lm_nll(&lm, &none), Err(ClsmError::EmptyEvaluation)));
}

#[test]
fn nll_is_a_per_sample_mean() {
    let lm = tiny(4, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_window(&mut rng, 8);
    let b = random_window(&mut rng, 8);
    let na = lm_nll(&lm, &[a.clone()]).unwrap();
    let nb = lm_nll(&lm, &[b.clone()]).unwrap();
    assert!((lm_nll(&lm, &vec![a.clone(); 70]).unwrap() - na).abs() < 1e-12);
    assert!((lm_nll(&lm, &[a, b]).unwrap() - (na + nb) / 2.0).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lm.ckpt");
    let lm = tiny(5, DType::F32);
    save_lm(&path, &lm, serde_json::Value::Null).unwrap();
    let LoadedModel::Lm(back) = load(&path, &Device::Cpu).unwrap() else { panic!("kind") };
    let x = ids_tensor(&[random_window(&mut ChaCha8Rng::seed_from_u64(5), 8)], &Device::Cpu).unwrap();
    let d = max_abs_diff(&lm.logits(&x, &Ctx::eval()).unwrap(), &back.logits(&x, &Ctx::eval()).unwrap());
    assert_eq!(d, 0.0);
}
