//! Model checkpoint container.
//!
//! ```text
//! magic        4 bytes  "RWTC"
//! version      u32 LE   (currently 1)
//! config_len   u32 LE
//! config       config_len bytes of UTF-8 JSON (ResRnnConfig)
//! count        u32 LE   number of tensors
//! per tensor:
//!   name_len   u32 LE
//!   name       name_len bytes UTF-8, e.g. "temporal.w_xf"
//!   ndim       u32 LE
//!   dims       ndim × u64 LE
//!   values     product(dims) × f64 LE, row-major
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ResRnnConfig, ResRnnParams};
use crate::error::{Error, Result};
use crate::io_util::Reader;
use crate::nn::{InitScheme, ParamTree};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RWTC";
pub const VERSION: u32 = 1;

pub fn encode(cfg: &ResRnnConfig, params: &ResRnnParams) -> Result<Vec<u8>> {
    params.validate(cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg).map_err(|e| Error::Malformed(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut entries = Vec::new();
    params.visit("", &mut |name, _, t| entries.push((name.to_string(), t)));
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ResRnnConfig, ResRnnParams)> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic { expected: "RWTC" });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let cfg: ResRnnConfig =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| Error::Malformed(format!("config: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        let ndim = r.u32("tensor rank")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r.f64s(n, "tensor values")?;
        tensors.insert(name, Tensor::new(dims, data)?);
    }
    if !r.is_done() {
        return Err(Error::Malformed("trailing bytes after last tensor".into()));
    }

    let mut params = ResRnnParams::init(&cfg, 0, InitScheme::Zeros)?;
    let mut missing = None;
    params.visit_mut("", &mut |name, _, slot| match tensors.remove(name) {
        Some(t) if t.shape() == slot.shape() => *slot = t,
        _ => {
            missing.get_or_insert_with(|| name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::Malformed(format!("tensor `{name}` missing or mis-shaped")));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Malformed(format!("unexpected tensor `{extra}`")));
    }
    params.validate(&cfg)?;
    Ok((cfg, params))
}

pub fn save(path: &Path, cfg: &ResRnnConfig, params: &ResRnnParams) -> Result<()> {
    let bytes = encode(cfg, params)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ResRnnConfig, ResRnnParams)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
