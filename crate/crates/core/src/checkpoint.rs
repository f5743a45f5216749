//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VMFNETCK" | u32 version | u64 meta_len | meta JSON
//! u8 dtype | u32 tensor_count
//! per tensor: u16 name_len | name | u8 kind | u8 ndim | u64 dims[ndim] | raw data
//! sha256 of everything above (32 bytes)
//! ```
//!
//! `kind` is 0 for parameters, 1 for normalization buffers, 2 and 3 for the
//! Adam first and second moments.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, Named, ParamStore};
use crate::optim::Adam;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"VMFNETCK";
pub const VERSION: u32 = 1;

const MAX_META: u64 = 1 << 24;
const MAX_TENSORS: u32 = 1 << 16;
const MAX_NDIM: u8 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub iteration: u64,
    pub seed: u64,
    /// Training configuration or other free-form provenance.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub meta: CheckpointMeta,
    pub store: ParamStore<T>,
    pub adam: Option<Adam<T>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Param = 0,
    Buffer = 1,
    Moment1 = 2,
    Moment2 = 3,
}

impl<T: Scalar> ModelState<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.push(T::DTYPE.code());

        let mut entries: Vec<(Kind, &str, &Tensor<T>)> = Vec::new();
        entries.extend(self.store.params.iter().map(|n| (Kind::Param, n.name.as_str(), &n.value)));
        entries.extend(self.store.buffers.iter().map(|n| (Kind::Buffer, n.name.as_str(), &n.value)));
        if let Some(adam) = &self.adam {
            for (p, (m, v)) in self.store.params.iter().zip(adam.m.iter().zip(&adam.v)) {
                entries.push((Kind::Moment1, p.name.as_str(), m));
                entries.push((Kind::Moment2, p.name.as_str(), v));
            }
        }
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (kind, name, t) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind as u8);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Decodes and validates a checkpoint. The stored dtype must match `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                expected: VERSION.to_string(),
            });
        }
        if bytes.len() < 12 + 32 {
            return Err(corrupt("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u64()?;
        if meta_len > MAX_META {
            return Err(corrupt("metadata too large"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len as usize)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        meta.model
            .validate()
            .map_err(|e| Error::CorruptCheckpoint(format!("stored model configuration: {e}")))?;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| corrupt("unknown dtype"))?;
        if dtype != T::DTYPE {
            return Err(Error::CorruptCheckpoint(format!(
                "stored dtype {dtype:?} does not match requested {:?}",
                T::DTYPE
            )));
        }
        let count = r.u32()?;
        if count > MAX_TENSORS {
            return Err(corrupt("too many tensors"));
        }
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let kind = r.u8()?;
            let ndim = r.u8()?;
            if ndim > MAX_NDIM {
                return Err(corrupt("tensor rank too large"));
            }
            let mut shape = Vec::with_capacity(ndim as usize);
            let mut len: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?;
                len = len.checked_mul(d).ok_or_else(|| corrupt("dimension overflow"))?;
                shape.push(d);
            }
            let nbytes = len.checked_mul(dtype.size()).ok_or_else(|| corrupt("tensor too large"))?;
            let raw = r.take(nbytes)?;
            let data: Vec<T> = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            let value = Tensor::from_vec(&shape, data)?;
            let named = Named { name, value };
            match kind {
                0 => params.push(named),
                1 => buffers.push(named),
                2 => m.push(named),
                3 => v.push(named),
                _ => return Err(corrupt("unknown tensor kind")),
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        let store = ParamStore::from_parts(params, buffers);
        store.check_layout(&meta.model)?;
        crate::nn::check_kernels(&store)
            .map_err(|e| Error::CorruptCheckpoint(format!("kernel bank: {e}")))?;
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            let aligned = |moments: &[Named<T>]| {
                moments.len() == store.params.len()
                    && moments
                        .iter()
                        .zip(&store.params)
                        .all(|(a, p)| a.name == p.name && a.value.shape() == p.value.shape())
            };
            if !aligned(&m) || !aligned(&v) {
                return Err(corrupt("optimizer moments do not match the parameters"));
            }
            let lr = meta.extra.get("adam_lr").and_then(|x| x.as_f64()).unwrap_or(0.0);
            let step = meta.extra.get("adam_step").and_then(|x| x.as_u64()).unwrap_or(0);
            Some(Adam {
                lr,
                step,
                m: m.into_iter().map(|n| n.value).collect(),
                v: v.into_iter().map(|n| n.value).collect(),
            })
        };
        Ok(Self { meta, store, adam })
    }

    /// Records the optimizer scalars in the metadata so they round-trip.
    pub fn sync_adam_meta(&mut self) {
        if let Some(adam) = &self.adam {
            if !self.meta.extra.is_object() {
                self.meta.extra = serde_json::json!({});
            }
            let obj = self.meta.extra.as_object_mut().unwrap();
            obj.insert("adam_lr".into(), serde_json::json!(adam.lr));
            obj.insert("adam_step".into(), serde_json::json!(adam.step));
        }
    }

    /// Writes through a temporary file and a rename so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut state = self.clone();
        state.sync_adam_meta();
        let bytes = state.to_bytes();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                depth: 2,
                base_channels: 4,
                feature_dim: 8,
                input_size: (8, 8),
                in_channels: 1,
            },
            head_hidden: 4,
            kernels: 3,
            ..ModelConfig::default()
        }
    }

    fn state(with_adam: bool) -> ModelState<f32> {
        let cfg = tiny();
        let store = ParamStore::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut adam = Adam::new(&store, 1e-3);
        adam.step = 7;
        for m in adam.m.iter_mut() {
            m.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 0.5);
        }
        let mut s = ModelState {
            meta: CheckpointMeta {
                model: cfg,
                iteration: 42,
                seed: 9,
                extra: serde_json::json!({}),
            },
            store,
            adam: with_adam.then_some(adam),
        };
        s.sync_adam_meta();
        s
    }

    #[test]
    fn bit_exact_roundtrip() {
        for with_adam in [false, true] {
            let s = state(with_adam);
            let bytes = s.to_bytes();
            let back = ModelState::<f32>::from_bytes(&bytes).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn detects_corruption() {
        let bytes = state(true).to_bytes();
        for cut in [0, 5, 12, 40, bytes.len() - 1] {
            assert!(ModelState::<f32>::from_bytes(&bytes[..cut]).is_err());
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(
            ModelState::<f32>::from_bytes(&flipped),
            Err(Error::CorruptCheckpoint(_))
        ));
        assert!(ModelState::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = state(false).to_bytes();
        bytes[8] = 9;
        assert!(matches!(ModelState::<f32>::from_bytes(&bytes), Err(Error::Version { .. })));
    }
}
