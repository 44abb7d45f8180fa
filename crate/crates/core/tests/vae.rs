mod common;

use candle_core::{DType, Device, Tensor, D};
use clsm_core::baseline_vae::{gaussian_kl, vae_interpolate, vae_loss, Vae, VaeConfig};
use clsm_core::checkpoint::{load, save_vae, LoadedModel};
use clsm_core::model::ids_tensor;
use clsm_core::nn::Ctx;
use clsm_core::sampler::{ContextualModel, DecodeStrategy};
use clsm_core::training::normal_noise;
use clsm_core::{Context, TargetSpan};
use common::{bits, random_window, zero_param};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64, dtype: DType) -> Vae {
    let cfg = VaeConfig { d_z: 4, token_embed: 8, hidden: 8, n_layers: 2, dropout: 0.0, gamma: 0.4, seq_len: 8 };
    Vae::new(cfg, seed, dtype, &Device::Cpu).unwrap()
}

#[test]
fn right_context_is_never_read() {
    let m = tiny(1, DType::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..100 {
        let start = rng.random_range(0..7);
        let length = rng.random_range(1..=8 - start);
        let span = TargetSpan { start, length };
        let w = random_window(&mut rng, 8);
        let mut other = w.clone();
        for t in other.iter_mut().skip(start + length) {
            *t = random_window(&mut rng, 1)[0];
        }
        let a = Context::from_window(&w, span).unwrap();
        let b = Context::from_window(&other, span).unwrap();
        let z = normal_noise(&mut rng, (1, 4), DType::F32, &Device::Cpu).unwrap();
        let ta = m.decode_targets(&z, &a, DecodeStrategy::Greedy).unwrap();
        let tb = m.decode_targets(&z, &b, DecodeStrategy::Greedy).unwrap();
        assert_eq!(ta, tb, "trial {trial}");
    }
}

#[test]
fn incremental_decoding_matches_teacher_forcing() {
    let m = tiny(2, DType::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let w = random_window(&mut rng, 8);
        let left = &w[..3];
        let z = normal_noise(&mut rng, (1, 4), DType::F32, &Device::Cpu).unwrap();
        let target = m.decode_from_left(&z, left, 5, DecodeStrategy::Greedy).unwrap().remove(0);
        let mut full = left.to_vec();
        full.extend_from_slice(&target);
        let logits = m.logits(&ids_tensor(&[full], &Device::Cpu).unwrap(), &z, &Ctx::eval()).unwrap();
        let argmax: Vec<u32> = logits.argmax(D::Minus1).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
        let want: Vec<u32> = target.iter().map(|t| t.index() as u32).collect();
        assert_eq!(&argmax[3..], want.as_slice());
    }
}

#[test]
fn zeroed_output_gives_uniform_reconstruction() {
    let m = tiny(3, DType::F64);
    zero_param(m.store(), "decoder.out.weight");
    zero_param(m.store(), "decoder.out.bias");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<_> = (0..4).map(|_| random_window(&mut rng, 8)).collect();
    let x = ids_tensor(&w, &Device::Cpu).unwrap();
    let eps = normal_noise(&mut rng, (4, 4), DType::F64, &Device::Cpu).unwrap();
    let (_, parts) = vae_loss(&m, &x, 0.0, &eps, &Ctx::eval()).unwrap();
    assert!((parts.rec + 32f64.ln()).abs() < 1e-12);
    let (_, weighted) = vae_loss(&m, &x, 0.4, &eps, &Ctx::eval()).unwrap();
    assert!((weighted.total - (0.4 * weighted.kl - weighted.rec)).abs() < 1e-12);
}

#[test]
fn analytic_kl_vanishes_at_standard_normal() {
    let z = Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap();
    let kl: Vec<f64> = gaussian_kl(&z, &z).unwrap().to_vec1().unwrap();
    assert_eq!(kl, vec![0.0; 3]);
}

#[test]
fn interpolation_yields_j_plus_one_windows() {
    let m = tiny(4, DType::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let span = TargetSpan { start: 2, length: 4 };
    let c = Context::from_window(&random_window(&mut rng, 8), span).unwrap();
    let z1 = normal_noise(&mut rng, (1, 4), DType::F32, &Device::Cpu).unwrap();
    let z2 = normal_noise(&mut rng, (1, 4), DType::F32, &Device::Cpu).unwrap();
    let seqs = vae_interpolate(&m, &z1, &z2, 2, &c).unwrap();
    assert_eq!(seqs.len(), 3);
    for s in &seqs {
        assert_eq!(&s[..2], c.left.as_slice());
        assert_eq!(&s[6..], c.right.as_slice());
    }
    let zs = m.interpolate_latents(&z1, &z2, 2, &c).unwrap();
    assert_eq!(bits(&zs[0]), bits(&z1));
    assert_eq!(bits(&zs[2]), bits(&z2));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae.ckpt");
    let m = tiny(5, DType::F32);
    save_vae(&path, &m, serde_json::Value::Null).unwrap();
    let LoadedModel::Vae(back) = load(&path, &Device::Cpu).unwrap() else { panic!("kind") };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = ids_tensor(&[random_window(&mut rng, 8)], &Device::Cpu).unwrap();
    assert_eq!(bits(&m.encode(&x, &Ctx::eval()).unwrap().mean), bits(&back.encode(&x, &Ctx::eval()).unwrap().mean));
}
