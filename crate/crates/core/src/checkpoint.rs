//! Single-file parameter container.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, JSON header
//! (kind, config echo, metadata, tensor index), then the little-endian
//! row-major payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"MTIQACKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub metadata: serde_json::Value,
    pub dtype: DType,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

impl Checkpoint {
    pub fn from_store(
        kind: &str,
        config: &impl Serialize,
        metadata: &impl Serialize,
        store: &ParamStore,
    ) -> Result<Self> {
        dtype_name(store.dtype())?;
        Ok(Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            metadata: serde_json::to_value(metadata)?,
            dtype: store.dtype(),
            tensors: store.export()?,
        })
    }

    pub fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn apply(&self, store: &ParamStore) -> Result<()> {
        store.import(&self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dt = dtype_name(self.dtype)?;
        let width = self.dtype.size_in_bytes();
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, (shape, data)) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dt.to_string(),
                shape: shape.clone(),
                offset: payload.len() as u64,
            });
            payload.reserve(data.len() * width);
            for &v in data {
                match self.dtype {
                    DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    _ => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        let mut dtype = None;
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let (dt, width) = match e.dtype.as_str() {
                "f32" => (DType::F32, 4),
                "f64" => (DType::F64, 8),
                other => return Err(Error::Checkpoint(format!("tensor {}: unknown dtype {other}", e.name))),
            };
            if *dtype.get_or_insert(dt) != dt {
                return Err(bad("mixed tensor dtypes"));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * width;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor {} runs past the payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(width)
                .map(|c| match dt {
                    DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    _ => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            tensors.insert(e.name.clone(), (e.shape.clone(), data));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            metadata: header.metadata,
            dtype: dtype.unwrap_or(DType::F32),
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Hex sha256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, Builder, Conv2d, ConvGeometry};

    fn store(dtype: DType, seed: u64) -> ParamStore {
        let mut s = ParamStore::new(dtype);
        let mut rng = init_rng(seed);
        let mut b = Builder::new(&mut s, &mut rng);
        Conv2d::new(&mut b.pp("c"), 2, 3, 3, ConvGeometry::same(3, 1), true).unwrap();
        b.buffer("running", &[3], 0.5).unwrap();
        s
    }

    #[test]
    fn round_trip_both_dtypes() {
        for dtype in [DType::F32, DType::F64] {
            let src = store(dtype, 1);
            let ck =
                Checkpoint::from_store("test", &serde_json::json!({"a": 1}), &serde_json::json!({}), &src).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.ckpt");
            ck.write(&p).unwrap();
            let back = Checkpoint::read(&p).unwrap();
            assert_eq!(back, ck);
            let dst = store(dtype, 2);
            back.apply(&dst).unwrap();
            assert_eq!(dst.export().unwrap(), src.export().unwrap());
        }
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::from_store("k", &(), &(), &store(DType::F32, 0)).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(ck.expect_kind("other").is_err());
    }
}
