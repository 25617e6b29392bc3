//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "HYNTCKPT"
//! version    u32       1
//! config     u32 length + UTF-8 JSON of the ModelConfig
//! count      u32       number of parameters
//! manifest   count x { u32 path length, path bytes, u8 dtype tag, u32 rank, u64 x rank dims }
//! payload    every parameter's elements in manifest order, little-endian
//! ```
//!
//! Parameters appear in path order, so encoding is a pure function of the
//! model and `save -> load -> save` reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HYNTCKPT";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar = f64> {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<T>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params().len())?;
    for (path, t) in model.params().iter() {
        put_u32(&mut out, path.len())?;
        out.extend_from_slice(path.as_bytes());
        out.push(T::DTYPE.tag());
        put_u32(&mut out, t.ndim())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in model.params().iter() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} too large")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let cfg_len = r.u32("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("bad config echo: {e}")))?;
    let count = r.u32("parameter count")?;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let plen = r.u32("path length")?;
        let path = std::str::from_utf8(r.take(plen, "path")?)
            .map_err(|_| Error::Checkpoint("parameter path is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("`{path}`: unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "`{path}`: stored as {}, loading as {}",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
        manifest.push((path, shape));
    }
    let size = T::DTYPE.size();
    let mut params = Vec::with_capacity(manifest.len());
    for (path, shape) in manifest {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{path}`: shape {shape:?} overflows")))?;
        let raw = r.take(n.checked_mul(size).unwrap_or(usize::MAX), &format!("payload of `{path}`"))?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{path}`: {e}")))?;
        params.push((path, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { version, config, params })
}

/// Check every stored tensor against the live model, then assign them all.
/// On any error the model is left untouched.
pub fn restore<T: Scalar>(model: &mut Model<T>, ckpt: Checkpoint<T>) -> Result<()> {
    let live: Vec<(&str, &[usize])> = model.params().iter().map(|(p, t)| (p, t.shape())).collect();
    for (i, (path, shape)) in live.iter().enumerate() {
        match ckpt.params.get(i) {
            Some((p, t)) if p == path && t.shape() == *shape => {}
            Some((p, t)) if p == path => {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch at `{path}`: model {shape:?}, checkpoint {:?}",
                    t.shape()
                )))
            }
            Some((p, _)) => {
                return Err(Error::Checkpoint(format!(
                    "manifest mismatch at `{path}`: checkpoint has `{p}` in its place"
                )))
            }
            None => return Err(Error::Checkpoint(format!("checkpoint is missing `{path}`"))),
        }
    }
    if let Some((p, _)) = ckpt.params.get(live.len()) {
        return Err(Error::Checkpoint(format!("checkpoint has extra parameter `{p}`")));
    }
    for (path, t) in ckpt.params {
        *model.params_mut().get_mut(&path)? = t;
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(model: &mut Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path)?;
    restore(model, decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_variant;

    #[test]
    fn encode_decode_restore_round_trip() {
        let a = build_variant::<f64>("micro", 1).unwrap();
        let bytes = encode(&a).unwrap();
        let mut b = build_variant::<f64>("micro", 2).unwrap();
        restore(&mut b, decode(&bytes).unwrap()).unwrap();
        assert!(a.params().bit_eq(b.params()));
        assert_eq!(encode(&b).unwrap(), bytes);
    }

    #[test]
    fn truncated_bytes_rejected_everywhere() {
        let mut cfg = crate::backbone::Variant::Micro.config();
        cfg.transformer_blocks = [0; 4];
        cfg.enable_hnb = false;
        let m = Model::<f64>::build(cfg, 0).unwrap();
        let bytes = encode(&m).unwrap();
        for cut in [0, 7, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode::<f64>(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let m = build_variant::<f32>("micro", 0).unwrap();
        let bytes = encode(&m).unwrap();
        assert!(decode::<f32>(&bytes).is_ok());
        assert!(decode::<f64>(&bytes).unwrap_err().to_string().contains("stored as f32"));
    }
}
