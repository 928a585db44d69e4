//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "VLFCKPT1"
//! meta_len   u32      length of the JSON metadata
//! meta       JSON     {"format_version", "config", "power", "extra"}
//! count      u32      number of arrays
//! per array:
//!   name_len u16, name (UTF-8)
//!   dtype    u8       1 = f32, 2 = f64
//!   ndim     u8
//!   dims     u32 * ndim
//!   data     little-endian values, row-major
//! ```
//!
//! All integers are little-endian. Loading checks every length against the
//! remaining input before allocating.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CodecConfig, CodecParameters, PowerStats};
use crate::error::{Error, Result};
use crate::tape::Mat;

pub const MAGIC: &[u8; 8] = b"VLFCKPT1";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;
const MAX_NDIM: u8 = 4;

fn first_round() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    config: CodecConfig,
    power: PowerStats,
    #[serde(default = "first_round")]
    first_decode_round: usize,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Serializes parameters plus free-form metadata (`extra`).
pub fn encode_checkpoint(params: &CodecParameters, extra: &serde_json::Value) -> Result<Vec<u8>> {
    let meta = Meta {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        power: params.power.clone(),
        first_decode_round: params.first_decode_round,
        extra: extra.clone(),
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + meta.len() + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, array) in params.names().iter().zip(&params.arrays) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(2);
        out.extend_from_slice(&(array.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(array.ncols() as u32).to_le_bytes());
        for v in array.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated at byte {} (need {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::parse("checkpoint", msg)
}

/// Parses a checkpoint, returning the parameters and the `extra` metadata.
///
/// Array names and shapes must match the layout implied by the stored
/// configuration exactly.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CodecParameters, serde_json::Value)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| bad(format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", meta.format_version)));
    }
    let cfg = meta.config;
    if cfg.bits_per_group > 10 || cfg.groups > 4096 || cfg.tau_max > 4096 || cfg.width > 4096 || cfg.shallow_depth > 64 || cfg.deep_depth > 64 {
        return Err(bad("configuration out of supported range"));
    }
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    let scalars: usize = super::Layout::new(&cfg).shapes.iter().map(|(r, c)| r * c).sum();
    if scalars > r.remaining() / 4 {
        return Err(bad("declared configuration needs more data than the file holds"));
    }
    let mut params = CodecParameters::zeros(cfg.clone()).map_err(|e| bad(e.to_string()))?;
    if meta.power.mean.len() != cfg.tau_max || meta.power.std.len() != cfg.tau_max {
        return Err(bad("power statistics do not cover tau_max rounds"));
    }
    if meta.power.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || meta.power.mean.iter().any(|m| !m.is_finite()) {
        return Err(bad("power statistics must be finite with positive std"));
    }
    params.power = meta.power;
    if meta.first_decode_round == 0 || meta.first_decode_round > cfg.tau_max {
        return Err(bad("first decode round outside 1..=tau_max"));
    }
    params.first_decode_round = meta.first_decode_round;

    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(bad(format!("expected {} arrays, found {count}", params.len())));
    }
    for i in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("array name is not UTF-8"))?;
        if name != params.layout.names[i] {
            return Err(bad(format!("array {i}: expected '{}', found '{name}'", params.layout.names[i])));
        }
        let dtype = r.u8()?;
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            other => return Err(bad(format!("array '{name}': unknown dtype {other}"))),
        };
        let ndim = r.u8()?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(bad(format!("array '{name}': unsupported rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let (rows, cols) = params.layout.shapes[i];
        let shape_ok = match dims.as_slice() {
            [r0, c0] => (*r0, *c0) == (rows, cols),
            [n] => rows == 1 && *n == cols,
            _ => false,
        };
        if !shape_ok {
            return Err(bad(format!("array '{name}': shape {dims:?}, expected [{rows}, {cols}]")));
        }
        let n = rows * cols;
        if r.remaining() / width < n {
            return Err(bad(format!("array '{name}': truncated data")));
        }
        let data = r.take(n * width)?;
        let values: Vec<f64> = if dtype == DTYPE_F64 {
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        } else {
            data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("array '{name}': non-finite value")));
        }
        params.arrays[i] = Mat::from_shape_vec((rows, cols), values).expect("length checked");
    }
    if r.remaining() != 0 {
        return Err(bad(format!("{} trailing bytes", r.remaining())));
    }
    Ok((params, meta.extra))
}

pub fn save_checkpoint(path: &Path, params: &CodecParameters, extra: &serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(params, extra)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CodecParameters, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Hex SHA-256 of a file, for run manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
