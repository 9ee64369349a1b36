//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FTCK" | u32 version | u32 entries
//! entries × (u32 name_len | name | u8 dtype | u32 ndim | ndim × u64 dim | f64 data)
//! u32 config_len | config text
//! u32 CRC32 of every preceding byte
//! ```
//!
//! The config text is the canonical run config followed by a `[state]`
//! section holding the step counter.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const STATE_HEADER: &str = "[state]";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    /// Canonical run config, without the `[state]` section.
    pub config: String,
    pub step: u64,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// The config text as stored, including the `[state]` section.
    pub fn stored_config(&self) -> String {
        let mut text = self.config.trim_end().to_string();
        text.push_str(&format!("\n\n{STATE_HEADER}\nstep = {}\n", self.step));
        text
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let config = self.stored_config();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version}, expected {VERSION}"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let entries = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(entries.min(1024));
        for _ in 0..entries {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: length exceeds file")))?;
            let data = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        let config_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes before checksum", r.remaining())));
        }
        let (config, step) = split_state(text)?;
        Ok(Checkpoint { tensors, config, step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn split_state(text: &str) -> Result<(String, u64)> {
    let idx = text
        .find(STATE_HEADER)
        .ok_or_else(|| Error::Checkpoint("config text lacks a [state] section".into()))?;
    let mut step = None;
    for line in text[idx + STATE_HEADER.len()..].lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            Some(("step", v)) => {
                step = Some(v.parse().map_err(|_| Error::Checkpoint(format!("bad step value {v:?}")))?)
            }
            _ => return Err(Error::Checkpoint(format!("unexpected [state] line {line:?}"))),
        }
    }
    let step = step.ok_or_else(|| Error::Checkpoint("[state] section lacks step".into()))?;
    Ok((text[..idx].trim_end().to_string() + "\n", step))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
