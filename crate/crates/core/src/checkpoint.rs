//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model kind, config, token alphabet, dtype and tensor shapes), then
//! every tensor's values in header order as little-endian floats.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::baseline_vae::{Vae, VaeConfig};
use crate::error::{ClsmError, Result};
use crate::lm::{EvalLm, LmConfig};
use crate::model::{Clsm, ModelConfig};
use crate::nn::ParamStore;
use crate::tokens::TokenAlphabet;

pub const MAGIC: &[u8; 8] = b"CLSMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Clsm,
    Vae,
    Lm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub alphabet: TokenAlphabet,
    pub dtype: String,
    pub tensors: Vec<TensorInfo>,
    /// Free-form provenance (seed, epochs, validation loss).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(ClsmError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(ClsmError::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

/// Write `tensors` (typically a store snapshot) with their config.
pub fn save_tensors(
    path: &Path,
    kind: ModelKind,
    config: &impl Serialize,
    dtype: DType,
    tensors: &[(String, Tensor)],
    meta: serde_json::Value,
) -> Result<()> {
    let header = Header {
        kind,
        config: serde_json::to_value(config)?,
        alphabet: TokenAlphabet::standard(),
        dtype: dtype_name(dtype)?.to_string(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorInfo { name: n.clone(), shape: t.dims().to_vec() })
            .collect(),
        meta,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, t) in tensors {
        let flat = t.flatten_all()?;
        match dtype {
            DType::F32 => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
            _ => {
                for v in flat.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Save the current parameters of `store`.
pub fn save_store(path: &Path, kind: ModelKind, config: &impl Serialize, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    save_tensors(path, kind, config, store.dtype(), &store.snapshot()?, meta)
}

/// Header plus raw tensors, before a model is rebuilt around them.
pub struct RawCheckpoint {
    pub header: Header,
    pub dtype: DType,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn read_raw(path: &Path, device: &Device) -> Result<RawCheckpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| ClsmError::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(ClsmError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(ClsmError::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let mut b8 = [0u8; 8];
    f.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut header = vec![0u8; len];
    f.read_exact(&mut header).map_err(|_| ClsmError::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.alphabet != TokenAlphabet::standard() {
        return Err(ClsmError::Checkpoint("token alphabet differs from this build".into()));
    }
    let dtype = parse_dtype(&header.dtype)?;
    let width = dtype.size_in_bytes();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let mut bytes = vec![0u8; n * width];
        f.read_exact(&mut bytes)
            .map_err(|_| ClsmError::Checkpoint(format!("truncated data for {}", info.name)))?;
        let t = match dtype {
            DType::F32 => {
                let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, info.shape.as_slice(), device)?
            }
            _ => {
                let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, info.shape.as_slice(), device)?
            }
        };
        tensors.push((info.name.clone(), t));
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ClsmError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(RawCheckpoint { header, dtype, tensors })
}

/// A checkpoint rebuilt into its model.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    Clsm(Clsm),
    Vae(Vae),
    Lm(EvalLm),
}

impl LoadedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            LoadedModel::Clsm(_) => ModelKind::Clsm,
            LoadedModel::Vae(_) => ModelKind::Vae,
            LoadedModel::Lm(_) => ModelKind::Lm,
        }
    }
}

fn config_of<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| ClsmError::Checkpoint(format!("bad config: {e}")))
}

/// Load and rebuild any model kind. Fails on version, alphabet or shape mismatch.
pub fn load(path: &Path, device: &Device) -> Result<LoadedModel> {
    let raw = read_raw(path, device)?;
    let model = match raw.header.kind {
        ModelKind::Clsm => {
            let m = Clsm::new(config_of::<ModelConfig>(&raw.header.config)?, 0, raw.dtype, device)?;
            m.store().restore(&raw.tensors)?;
            LoadedModel::Clsm(m)
        }
        ModelKind::Vae => {
            let m = Vae::new(config_of::<VaeConfig>(&raw.header.config)?, 0, raw.dtype, device)?;
            m.store().restore(&raw.tensors)?;
            LoadedModel::Vae(m)
        }
        ModelKind::Lm => {
            let m = EvalLm::new(config_of::<LmConfig>(&raw.header.config)?, 0, raw.dtype, device)?;
            m.store().restore(&raw.tensors)?;
            LoadedModel::Lm(m)
        }
    };
    Ok(model)
}

pub fn save_clsm(path: &Path, model: &Clsm, meta: serde_json::Value) -> Result<()> {
    save_store(path, ModelKind::Clsm, model.config(), model.store(), meta)
}

pub fn save_vae(path: &Path, model: &Vae, meta: serde_json::Value) -> Result<()> {
    save_store(path, ModelKind::Vae, model.config(), model.store(), meta)
}

pub fn save_lm(path: &Path, model: &EvalLm, meta: serde_json::Value) -> Result<()> {
    save_store(path, ModelKind::Lm, model.config(), model.store(), meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ids_tensor;
    use crate::nn::Ctx;
    use crate::tokens::Token;
    use crate::TargetSpan;

    fn tiny() -> Clsm {
        Clsm::new(ModelConfig::tiny(), 7, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        m.store().pp("flow").randomize(1, 0.2).unwrap();
        save_clsm(&path, &m, serde_json::json!({"seed": 7})).unwrap();
        let LoadedModel::Clsm(back) = load(&path, &Device::Cpu).unwrap() else { panic!("kind") };
        let x = ids_tensor(&[vec![Token::REST; 8]], &Device::Cpu).unwrap();
        let span = TargetSpan { start: 2, length: 4 };
        let a = m.encode_posterior(&x, &span, &Ctx::eval()).unwrap().mean.to_vec2::<f32>().unwrap();
        let b = back.encode_posterior(&x, &span, &Ctx::eval()).unwrap().mean.to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        let z = Tensor::ones((1, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(
            m.flow_forward(&z).unwrap().0.to_vec2::<f32>().unwrap(),
            back.flow_forward(&z).unwrap().0.to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_clsm(&path, &tiny(), serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path, &Device::Cpu).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        // claim a wider model in the header than the tensors describe
        let cfg = ModelConfig { hidden: 16, ..ModelConfig::tiny() };
        save_store(&path, ModelKind::Clsm, &cfg, m.store(), serde_json::Value::Null).unwrap();
        assert!(matches!(load(&path, &Device::Cpu), Err(ClsmError::Checkpoint(_))));
    }

    #[test]
    fn garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"hello").unwrap();
        assert!(matches!(load(&path, &Device::Cpu), Err(ClsmError::Checkpoint(_))));
    }
}
