//! Versioned little-endian binary container for encoder parameters.
//!
//! Layout: 8-byte magic, `u32` version, `u64` length + JSON config, `u32`
//! tensor count, then per tensor `u32` name length + name, `u32` rank,
//! `u64` dims and `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use super::{Encoder, EncoderConfig, EncoderError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSIGENC\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fail(path: &Path, reason: impl Into<String>) -> EncoderError {
    EncoderError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(encoder: &Encoder, path: &Path) -> Result<(), EncoderError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&encoder.config).expect("config serializes");
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let named = encoder.params.named();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| fail(path, e.to_string()))?;
    f.write_all(&buf).map_err(|e| fail(path, e.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Reads a checkpoint. With `expected`, a differing stored config is an error.
pub fn load_checkpoint(path: &Path, expected: Option<&EncoderConfig>) -> Result<Encoder, EncoderError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| fail(path, e.to_string()))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    let truncated = || fail(path, "truncated file");
    if c.take(8).ok_or_else(truncated)? != CHECKPOINT_MAGIC {
        return Err(fail(path, "not an encoder checkpoint"));
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(path, format!("unsupported version {version}")));
    }
    let n = c.u64().ok_or_else(truncated)? as usize;
    let config: EncoderConfig =
        serde_json::from_slice(c.take(n).ok_or_else(truncated)?).map_err(|e| fail(path, e.to_string()))?;
    if let Some(want) = expected {
        if *want != config {
            return Err(fail(
                path,
                format!(
                    "stored config {} differs from expected {}",
                    serde_json::to_string(&config).unwrap_or_default(),
                    serde_json::to_string(want).unwrap_or_default()
                ),
            ));
        }
    }
    let mut encoder = Encoder::build(config.clone(), 0)?;
    let names: Vec<(String, Vec<usize>)> = encoder
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = c.u32().ok_or_else(truncated)? as usize;
    if count != names.len() {
        return Err(fail(path, format!("expected {} tensors, found {count}", names.len())));
    }
    for ((want_name, want_shape), slot) in names.into_iter().zip(encoder.params.tensors_mut()) {
        let len = c.u32().ok_or_else(truncated)? as usize;
        let name = String::from_utf8(c.take(len).ok_or_else(truncated)?.to_vec())
            .map_err(|_| fail(path, "tensor name is not UTF-8"))?;
        if name != want_name {
            return Err(fail(path, format!("expected tensor {want_name}, found {name}")));
        }
        let rank = c.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        if shape != want_shape {
            return Err(fail(path, format!("{name}: shape {shape:?}, expected {want_shape:?}")));
        }
        let raw = c.take(8 * slot.len()).ok_or_else(truncated)?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        if !slot.all_finite() {
            return Err(fail(path, format!("{name} holds non-finite values")));
        }
    }
    if c.pos != bytes.len() {
        return Err(fail(path, "trailing bytes"));
    }
    Ok(encoder)
}
