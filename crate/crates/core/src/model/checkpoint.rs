//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "FSOLCKPT"
//! version    u32      1
//! dtype      u8       0 = f32, 1 = f64
//! meta_len   u32      length of the UTF-8 metadata (model config as JSON)
//! meta       meta_len bytes
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8), ndim u32, dims (u64 × ndim),
//!   data     (product of dims) elements of dtype
//! ```

use std::path::Path;

use super::config::ModelConfig;
use super::net::Fsol;
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"FSOLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub dtype: DType,
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<T: Scalar>(model: &Fsol<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(match T::DTYPE {
        DType::F32 => 0,
        DType::F64 => 1,
    });
    let meta = serde_json::to_string(model.config()).expect("config serializes");
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(meta.as_bytes());
    put_u32(&mut out, model.params().len() as u32);
    for (name, t) in model.params().iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                format: "checkpoint",
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| bad(e.to_string()))
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "checkpoint",
        detail: detail.into(),
    }
}

/// Parses a checkpoint, converting stored values to `T` when the stored
/// precision differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("missing FSOLCKPT magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dtype = match r.take(1)?[0] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(bad(format!("unknown dtype tag {other}"))),
    };
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let config: ModelConfig = serde_json::from_str(&meta).map_err(|e| bad(format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * dtype.size_of())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        tensors.push((name.clone(), Tensor::new(&dims, data).map_err(|e| bad(format!("{name}: {e}")))?));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { dtype, config, tensors })
}

pub fn save<T: Scalar>(model: &Fsol<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

/// Builds a model with the architecture stored in the checkpoint.
pub fn load<T: Scalar>(path: &Path) -> Result<Fsol<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode::<T>(&bytes)?;
    let mut model = Fsol::new(ck.config, 0)?;
    model.params_mut().load_named(ck.tensors)?;
    Ok(model)
}

/// Loads weights into an existing model; architecture differences are
/// reported tensor by tensor.
pub fn load_into<T: Scalar>(model: &mut Fsol<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode::<T>(&bytes)?;
    model.params_mut().load_named(ck.tensors)
}
