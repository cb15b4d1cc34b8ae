//! Binary checkpoints of named tensors.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "ANATCKPT"
//! version    u32      1
//! kind       u32      0 = parameters, 1 = training state
//! meta_len   u64      length of the JSON metadata
//! meta       bytes    UTF-8 JSON (contains the encoder config)
//! count      u32      number of tensors
//! tensor*    u32 name_len, name bytes, u64 rows, u64 cols, rows*cols f64
//! checksum   u64      FNV-1a of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Mat;
use crate::textembed::fnv1a64;

pub const MAGIC: &[u8; 8] = b"ANATCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Params = 0,
    TrainState = 1,
}

pub struct RawCheckpoint {
    pub kind: Kind,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

pub fn encode(kind: Kind, meta: &serde_json::Value, tensors: &[(String, &Mat)]) -> Vec<u8> {
    let meta_bytes = serde_json::to_vec(meta).expect("json metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols as u64).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or(Error::Checkpoint {
                offset: start,
                message: format!("implausible {what} {v}"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let at = c.pos;
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: at,
            message: format!("unsupported version {version}"),
        });
    }
    let at = c.pos;
    let kind = match c.u32("kind")? {
        0 => Kind::Params,
        1 => Kind::TrainState,
        k => {
            return Err(Error::Checkpoint {
                offset: at,
                message: format!("unknown kind {k}"),
            })
        }
    };
    let meta_len = c.len("metadata length")?;
    let at = c.pos;
    let meta: serde_json::Value = serde_json::from_slice(c.take(meta_len, "metadata")?).map_err(|e| Error::Checkpoint {
        offset: at,
        message: format!("metadata: {e}"),
    })?;
    let count = c.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint {
                offset: at,
                message: "tensor name is not utf-8".into(),
            })?
            .to_string();
        let rows = c.len("rows")?;
        let cols = c.len("cols")?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| c.err(format!("tensor `{name}` shape {rows}x{cols} too large")))?;
        let raw = c.take(n * 8, &format!("tensor `{name}` data"))?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push((name, Mat::from_vec(rows, cols, data)));
    }
    let body_end = c.pos;
    let stored = c.u64("checksum")?;
    if stored != fnv1a64(&bytes[..body_end]) {
        return Err(Error::Checkpoint {
            offset: body_end,
            message: "checksum mismatch".into(),
        });
    }
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes after checksum"));
    }
    Ok(RawCheckpoint { kind, meta, tensors })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Fills `params` from decoded tensors named with `prefix`, checking names,
/// order and shapes.
fn fill(params: &mut EncoderParams, tensors: &mut std::slice::Iter<'_, (String, Mat)>, prefix: &str) -> Result<()> {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let expected = format!("{prefix}{name}");
        let (got, m) = tensors.next().ok_or_else(|| Error::Checkpoint {
            offset: 0,
            message: format!("missing tensor `{expected}`"),
        })?;
        if *got != expected || m.rows != slot.rows || m.cols != slot.cols {
            return Err(Error::Checkpoint {
                offset: 0,
                message: format!(
                    "expected `{expected}` {}x{}, found `{got}` {}x{}",
                    slot.rows, slot.cols, m.rows, m.cols
                ),
            });
        }
        slot.data.copy_from_slice(&m.data);
    }
    Ok(())
}

fn config_from_meta(meta: &serde_json::Value) -> Result<EncoderConfig> {
    let cfg = meta.get("encoder").ok_or_else(|| Error::Checkpoint {
        offset: 0,
        message: "metadata lacks `encoder`".into(),
    })?;
    let config: EncoderConfig = serde_json::from_value(cfg.clone())?;
    config.validate()?;
    Ok(config)
}

pub fn params_to_bytes(params: &EncoderParams) -> Vec<u8> {
    let meta = serde_json::json!({ "encoder": params.config });
    encode(Kind::Params, &meta, &params.tensors())
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
    let raw = decode(bytes)?;
    if raw.kind != Kind::Params {
        return Err(Error::Checkpoint {
            offset: 12,
            message: "file holds a training state, not parameters".into(),
        });
    }
    let config = config_from_meta(&raw.meta)?;
    let mut params = EncoderParams::zeros(&config);
    let mut it = raw.tensors.iter();
    fill(&mut params, &mut it, "")?;
    if it.next().is_some() {
        return Err(Error::Checkpoint {
            offset: 0,
            message: "unexpected extra tensors".into(),
        });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    write_atomic(path, &params_to_bytes(params))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    params_from_bytes(&read_file(path)?)
}

/// Where a training run stands between epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Epochs fully completed.
    pub epochs_done: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
}

/// Parameters, optimizer moments and progress; enough to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub optimizer: AdamW,
    pub progress: Progress,
}

pub fn state_to_bytes(state: &TrainState) -> Vec<u8> {
    let meta = serde_json::json!({
        "encoder": state.params.config,
        "optimizer": state.optimizer.config,
        "optimizer_step": state.optimizer.step,
        "progress": state.progress,
    });
    let mut tensors = state.params.tensors();
    for (prefix, set) in [("adam.m.", &state.optimizer.m), ("adam.v.", &state.optimizer.v)] {
        tensors.extend(set.tensors().into_iter().map(|(n, m)| (format!("{prefix}{n}"), m)));
    }
    encode(Kind::TrainState, &meta, &tensors)
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let raw = decode(bytes)?;
    if raw.kind != Kind::TrainState {
        return Err(Error::Checkpoint {
            offset: 12,
            message: "file holds parameters, not a training state".into(),
        });
    }
    let config = config_from_meta(&raw.meta)?;
    let field = |k: &str| {
        raw.meta.get(k).cloned().ok_or_else(|| Error::Checkpoint {
            offset: 0,
            message: format!("metadata lacks `{k}`"),
        })
    };
    let opt_config: AdamWConfig = serde_json::from_value(field("optimizer")?)?;
    let opt_step: u64 = serde_json::from_value(field("optimizer_step")?)?;
    let progress: Progress = serde_json::from_value(field("progress")?)?;
    let mut params = EncoderParams::zeros(&config);
    let mut optimizer = AdamW::new(opt_config, &params);
    optimizer.step = opt_step;
    let mut it = raw.tensors.iter();
    fill(&mut params, &mut it, "")?;
    fill(&mut optimizer.m, &mut it, "adam.m.")?;
    fill(&mut optimizer.v, &mut it, "adam.v.")?;
    Ok(TrainState {
        params,
        optimizer,
        progress,
    })
}

pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &state_to_bytes(state))
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    state_from_bytes(&read_file(path)?)
}
