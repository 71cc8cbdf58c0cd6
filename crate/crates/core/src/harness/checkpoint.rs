//! Checkpoint container.
//!
//! ```text
//! magic        8 bytes  "LTOPOCK\0"
//! header_len   u32 LE
//! header       JSON {"format_version": 1, "config": RunConfig, "seed": u64}
//! n_params     u32 LE
//! per parameter, in registration order:
//!   name_len u32 LE, name UTF-8
//!   rank u32 LE, dims u64 LE × rank
//!   values f32 LE × numel
//! ```
//!
//! The header stores the configuration with `out` cleared, so the bytes depend
//! only on what was trained, not on where it was written.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::decoder::init_params;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"LTOPOCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: RunConfig,
    pub seed: u64,
}

pub fn encode(cfg: &RunConfig, store: &ParamStore<f32>) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: RunConfig {
            out: PathBuf::new(),
            ..cfg.clone()
        },
        seed: cfg.seed,
    };
    let json = serde_json::to_vec(&header).expect("header serialization is infallible");
    let mut buf = Vec::with_capacity(store.numel() * 4 + json.len() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Parse {
            path: format!("byte {}", self.pos),
            message: "checkpoint is truncated".into(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and checks it against the parameter layout its own
/// configuration implies.
pub fn decode(bytes: &[u8]) -> Result<(RunConfig, ParamStore<f32>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Parse {
            path: "magic".into(),
            message: "not a checkpoint file".into(),
        });
    }
    let hlen = r.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Parse {
        path: "header".into(),
        message: e.to_string(),
    })?;
    let version = header.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::UnsupportedVersion {
            found: version.map_or("none".into(), |v| v.to_string()),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let header: CheckpointHeader = serde_path_to_error::deserialize(header).map_err(|e| Error::Parse {
        path: format!("header.{}", e.path()),
        message: e.into_inner().to_string(),
    })?;

    let mut store = init_params::<f32>(&header.config.decoder, header.seed)?;
    let expected: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    let n = r.u32()? as usize;
    let mismatch = |what: String| Error::UnsupportedVersion {
        found: what,
        expected: "the parameter layout of the stored configuration".into(),
    };
    if n != expected.len() {
        return Err(mismatch(format!("{n} parameters vs {}", expected.len())));
    }
    for (name, shape) in &expected {
        let len = r.u32()? as usize;
        let got = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Parse {
            path: "parameter name".into(),
            message: "invalid UTF-8".into(),
        })?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &got != name || &dims != shape {
            return Err(mismatch(format!(
                "parameter `{got}` {dims:?} where `{name}` {shape:?} belongs"
            )));
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.set(name, Tensor::new(dims, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            path: format!("byte {}", r.pos),
            message: "trailing bytes after the last parameter".into(),
        });
    }
    Ok((header.config, store))
}

/// Git-style content hash: `sha256("blob <len>\0" ++ bytes)`, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Writes the checkpoint and returns its content hash.
pub fn save(path: impl AsRef<Path>, cfg: &RunConfig, store: &ParamStore<f32>) -> Result<String> {
    let bytes = encode(cfg, store);
    std::fs::write(path.as_ref(), &bytes).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(content_hash(&bytes))
}

pub fn load(path: impl AsRef<Path>) -> Result<(RunConfig, ParamStore<f32>)> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode(&bytes)
}
