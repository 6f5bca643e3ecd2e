//! Self-describing checkpoint container.
//!
//! ```text
//! magic      8 bytes  "DMOECKPT"
//! version    u32      1
//! config     u32 length + UTF-8 TOML of the ModelConfig
//! count      u32      number of tensors
//! entries    per tensor: u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//!            u8 rank, rank x u64 dims
//! payloads   per tensor in entry order, little-endian row-major values
//! ```
//!
//! All integers are little-endian. Payloads may contain the masked-logit
//! sentinel (`-inf`), which survives both storage widths.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::transformer::{MoeModel, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"DMOECKPT";
const VERSION: u32 = 1;

/// Storage width of checkpoint payloads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageDtype {
    F32,
    F64,
}

impl StorageDtype {
    fn code(self) -> u8 {
        match self {
            StorageDtype::F32 => 0,
            StorageDtype::F64 => 1,
        }
    }
}

pub fn encode(model: &MoeModel, dtype: StorageDtype) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = toml::to_string(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    put_bytes(&mut out, cfg.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        put_bytes(&mut out, name.as_bytes());
        out.push(dtype.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in params.iter() {
        match dtype {
            StorageDtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            StorageDtype::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn decode(buf: &[u8]) -> Result<MoeModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config: ModelConfig = toml::from_str(&r.string()?).map_err(|e| Error::Format(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let dtype = match r.u8()? {
            0 => StorageDtype::F32,
            1 => StorageDtype::F64,
            other => return Err(Error::Format(format!("unknown dtype code {other} for {name}"))),
        };
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        header.push((name, dtype, shape));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, dtype, shape) in header {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            StorageDtype::F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            StorageDtype::F64 => {
                r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
            }
        };
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after payloads", buf.len() - r.pos)));
    }
    MoeModel::from_parts(config, ParamStore::new(entries))
}

pub fn save(model: &MoeModel, path: &Path, dtype: StorageDtype) -> Result<()> {
    let bytes = encode(model, dtype)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MoeModel> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MoeModel {
        let cfg = ModelConfig {
            vocab_size: 7,
            num_layers: 1,
            hidden: 4,
            attn_inner: 4,
            num_heads: 2,
            kv_heads: 1,
            expert_inner: 3,
            num_experts: 3,
            top_k: 2,
            num_zero_experts: 1,
            max_seq_len: 5,
            ..ModelConfig::default()
        };
        MoeModel::init(cfg, 1).unwrap()
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let m = tiny();
        let back = decode(&encode(&m, StorageDtype::F64).unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn f32_storage_is_stable_after_first_rounding() {
        let m = tiny();
        let once = encode(&m, StorageDtype::F32).unwrap();
        let loaded = decode(&once).unwrap();
        let twice = encode(&loaded, StorageDtype::F32).unwrap();
        assert_eq!(once, twice);
        let reloaded = decode(&twice).unwrap();
        assert_eq!(reloaded.params(), loaded.params());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode(b"nonsense"), Err(Error::Format(_))));
        let mut bytes = encode(&tiny(), StorageDtype::F64).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }
}
