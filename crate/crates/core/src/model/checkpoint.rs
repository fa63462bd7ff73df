//! Checkpoint encoding.
//!
//! Layout (little-endian): magic `ASPC`, u32 version, the model config
//! (u32 heads, d_word, d_img, d_shared, mlp_depth; f64 dropout, temperature,
//! ln_eps; u8 residual flag), u32 tensor count, then per tensor a u32-length
//! UTF-8 name, u32 rank, u32 dims and f64 data. Token tables come first as
//! `tokens.attr` / `tokens.obj`, followed by the weights in canonical order.

use std::collections::HashMap;
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams, Result, Weights};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"ASPC";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.heads, c.d_word, c.d_img, c.d_shared, c.mlp_depth] {
        put_u32(&mut out, v);
    }
    for v in [c.dropout, c.temperature, c.ln_eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(c.attention_residual as u8);

    let named = params.weights.named();
    put_u32(&mut out, named.len() + 2);
    put_tensor(&mut out, "tokens.attr", &params.attr_tokens);
    put_tensor(&mut out, "tokens.obj", &params.obj_tokens);
    for (name, t) in named {
        put_tensor(&mut out, &name, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::CorruptManifest(format!("truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()?;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| ModelError::CorruptManifest("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()?;
        if rank > 8 {
            return Err(ModelError::CorruptManifest(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c.saturating_mul(8) <= self.bytes.len() - self.at)
            .ok_or_else(|| ModelError::CorruptManifest(format!("{name}: shape {shape:?} exceeds file")))?;
        let data = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| ModelError::CorruptManifest(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::CorruptManifest("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(ModelError::VersionMismatch(version));
    }
    let config = ModelConfig {
        heads: r.u32()?,
        d_word: r.u32()?,
        d_img: r.u32()?,
        d_shared: r.u32()?,
        mlp_depth: r.u32()?,
        dropout: r.f64()?,
        temperature: r.f64()?,
        ln_eps: r.f64()?,
        attention_residual: match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(ModelError::CorruptManifest(format!("residual flag {b}"))),
        },
    };
    config
        .validate()
        .map_err(|e| ModelError::CorruptManifest(e.to_string()))?;

    let count = r.u32()?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(ModelError::CorruptManifest(format!("duplicate tensor {name}")));
        }
    }
    if r.at != bytes.len() {
        return Err(ModelError::CorruptManifest(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }

    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| ModelError::CorruptManifest(format!("missing tensor {name}")))
    };
    let attr_tokens = take("tokens.attr")?;
    let obj_tokens = take("tokens.obj")?;
    let mut weights = Weights::zeros(&config);
    let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(weights.slots_mut()) {
        let t = take(name)?;
        if t.shape() != slot.shape() {
            return Err(ModelError::CorruptManifest(format!(
                "{name}: shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ModelError::CorruptManifest(format!("unexpected tensor {extra}")));
    }
    for (what, t) in [("tokens.attr", &attr_tokens), ("tokens.obj", &obj_tokens)] {
        if t.rank() != 2 || t.cols() != config.d_word {
            return Err(ModelError::CorruptManifest(format!("{what}: shape {:?}", t.shape())));
        }
    }
    Ok(ModelParams {
        config,
        attr_tokens,
        obj_tokens,
        weights,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
