//! Checkpoint file: a text header, the run configuration echo, then named
//! little-endian f64 tensors.
//!
//! ```text
//! DMPTCKPT version=1 step=S epoch=E cursor=C adam_t=T tensors=N config_bytes=B\n
//! <B bytes of key = value configuration>
//! N records: u32 name length, name, u8 kind, u32 ndim, ndim × u64 dims, f64 data
//! ```
//!
//! Kinds: 0 trainable parameter, 1 frozen parameter, 2 Adam first moment,
//! 3 Adam second moment. Moment records carry the parameter's name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::datagen::SamplerState;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::numerics::Tensor;

pub const CKPT_MAGIC: &str = "DMPTCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Trainable = 0,
    Frozen = 1,
    AdamM = 2,
    AdamV = 3,
}

impl RecordKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => RecordKind::Trainable,
            1 => RecordKind::Frozen,
            2 => RecordKind::AdamM,
            3 => RecordKind::AdamV,
            _ => return Err(Error::Format(format!("unknown record kind {b}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub kind: RecordKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub sampler: SamplerState,
    pub adam_t: u64,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let config = self.config.to_text();
        let mut out = format!(
            "{CKPT_MAGIC} version={CKPT_VERSION} step={} epoch={} cursor={} adam_t={} tensors={} config_bytes={}\n",
            self.step,
            self.sampler.epoch,
            self.sampler.cursor,
            self.adam_t,
            self.records.len(),
            config.len()
        )
        .into_bytes();
        out.extend_from_slice(config.as_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.kind as u8);
            out.extend_from_slice(&(r.tensor.ndim() as u32).to_le_bytes());
            for &d in r.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in r.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint has no header line".into()))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(CKPT_MAGIC) {
            return Err(Error::Format(format!("not a checkpoint (expected {CKPT_MAGIC})")));
        }
        let fields: BTreeMap<&str, &str> = parts.filter_map(|p| p.split_once('=')).collect();
        let get = |k: &str| -> Result<u64> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks {k}")))
        };
        let version = get("version")?;
        if version != CKPT_VERSION as u64 {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut r = Reader {
            bytes: &bytes[nl + 1..],
            pos: 0,
        };
        let config_text = std::str::from_utf8(r.take(get("config_bytes")? as usize)?)
            .map_err(|_| Error::Format("configuration is not UTF-8".into()))?;
        let config = RunConfig::from_text(config_text)?;
        let n = get("tensors")? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let kind = RecordKind::from_byte(r.take(1)?[0])?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push(Record {
                name,
                kind,
                tensor: Tensor::new(shape, data)?,
            });
        }
        if r.pos != r.bytes.len() {
            return Err(Error::Length {
                expected: nl + 1 + r.pos,
                actual: bytes.len(),
            });
        }
        Ok(Checkpoint {
            config,
            step: get("step")? as usize,
            sampler: SamplerState {
                epoch: get("epoch")?,
                cursor: get("cursor")? as usize,
            },
            adam_t: get("adam_t")?,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Length {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
