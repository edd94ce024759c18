//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IDFC" | version u32 | param count u32 | param records
//!        | momentum count u32 | momentum records
//!        | iteration u64 | rng state u64 | config length u32 | config UTF-8
//! record: name length u16 | name | rank u8 | dims u32 * rank | values f64 * numel | crc32 u32
//! ```
//!
//! The CRC covers every preceding byte of its record.

use std::path::Path;

use crate::error::FormatError;
use crate::model::{Group, Model};
use crate::tensor::Tensor;

use super::config::TrainConfig;

pub const MAGIC: [u8; 4] = *b"IDFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
    pub iteration: u64,
    pub rng_state: u64,
    /// `TrainConfig` in its canonical text form.
    pub config: String,
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    let start = out.len();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let found = self.bytes.len() - self.pos;
        if found < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                found,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn record(&mut self, index: usize) -> Result<(String, Tensor), FormatError> {
        let start = self.pos;
        let name_len = u16::from_le_bytes(self.array()?) as usize;
        let name_bytes = self.take(name_len)?;
        let rec_err = |name: &str, msg: String| FormatError::Record {
            record: index,
            name: name.to_string(),
            offset: start,
            msg,
        };
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| rec_err("?", "name is not UTF-8".into()))?
            .to_string();
        let rank = self.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| rec_err(&name, format!("shape {shape:?} overflows")))?;
        let raw = self.take(numel)?;
        let body_end = self.pos;
        let stored = self.u32()?;
        let actual = crc32fast::hash(&self.bytes[start..body_end]);
        if stored != actual {
            return Err(rec_err(
                &name,
                format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
            ));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for table in [&self.params, &self.momentum] {
            out.extend_from_slice(&(table.len() as u32).to_le_bytes());
            for (name, t) in table {
                put_record(&mut out, name, t);
            }
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.array()?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let mut tables = [Vec::new(), Vec::new()];
        let mut index = 0;
        for table in &mut tables {
            let n = r.u32()?;
            for _ in 0..n {
                table.push(r.record(index)?);
                index += 1;
            }
        }
        let iteration = r.u64()?;
        let rng_state = r.u64()?;
        let len = r.u32()? as usize;
        let offset = r.pos;
        let config = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Header {
                offset,
                msg: "config is not UTF-8".into(),
            })?
            .to_string();
        if r.pos != bytes.len() {
            return Err(FormatError::Header {
                offset: r.pos,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let [params, momentum] = tables;
        Ok(Self {
            params,
            momentum,
            iteration,
            rng_state,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| FormatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| FormatError::io(path, e))?)
    }

    /// Snapshot of a model's parameters and momentum buffers.
    pub fn from_model(model: &Model, iteration: u64, rng_state: u64, config: &TrainConfig) -> Self {
        let mut params = Vec::new();
        let mut momentum = Vec::new();
        for (name, p) in model.named_params() {
            let m = Tensor::new(p.value.shape(), p.momentum.clone()).expect("momentum matches value");
            params.push((name.clone(), p.value.clone().with_requires_grad(false)));
            momentum.push((name, m));
        }
        Self {
            params,
            momentum,
            iteration,
            rng_state,
            config: config.to_text(),
        }
    }

    /// Rebuilds the config and model. Every parameter of the architecture must
    /// be present with its exact shape.
    pub fn restore(&self) -> Result<(TrainConfig, Model), FormatError> {
        let cfg = TrainConfig::from_text(&self.config)?;
        let mut model = Model::new(cfg.model_config(), 0)?;
        let expected = model.named_params().count();
        if self.params.len() != expected || self.momentum.len() != expected {
            return Err(FormatError::Config(format!(
                "checkpoint has {} parameters and {} momentum buffers, architecture needs {expected}",
                self.params.len(),
                self.momentum.len()
            )));
        }
        for (index, ((name, value), (mname, mom))) in self.params.iter().zip(&self.momentum).enumerate() {
            let mismatch = |msg: String| FormatError::Record {
                record: index,
                name: name.clone(),
                offset: 0,
                msg,
            };
            if name != mname {
                return Err(mismatch(format!("momentum entry is named {mname}")));
            }
            let (gname, pname) = name
                .split_once('.')
                .ok_or_else(|| mismatch("name lacks a group prefix".into()))?;
            let group = Group::from_name(gname).ok_or_else(|| mismatch(format!("unknown group {gname}")))?;
            let p = model
                .group_mut(group)
                .get_mut(pname)
                .ok_or_else(|| mismatch("not part of this architecture".into()))?;
            if p.value.shape() != value.shape() || mom.shape() != value.shape() {
                return Err(mismatch(format!(
                    "shape {:?} does not match architecture {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(value.data());
            p.momentum.copy_from_slice(mom.data());
        }
        Ok((cfg, model))
    }
}
