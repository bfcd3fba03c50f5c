//! Binary checkpoint container: parameters, batch-norm statistics and optimizer moments.
//!
//! Layout (little-endian): magic `CATSCKPT`, `u32` format version, `u8` dtype code,
//! `u32` length + JSON header, `u64` entry count, entries, then `END!`. Each entry is
//! `u8` kind, `u32` name length + UTF-8 name, `u32` rank, `u64` extents, raw values.

use std::io::Write;
use std::path::Path;

use cats_autodiff::ops::RunningStats;
use cats_autodiff::{DType, Element, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::CatsConfig;
use crate::error::{CatsError, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{ModelState, ParameterSet, StatsSet};
use crate::preprocess::PreprocessConfig;

pub const MAGIC: &[u8; 8] = b"CATSCKPT";
pub const FORMAT_VERSION: u32 = 1;
const TRAILER: &[u8; 4] = b"END!";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint stores {found} values, {expected} requested")]
    DtypeMismatch { found: String, expected: DType },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: String,
    pub config: CatsConfig,
    pub step: u64,
    pub seed: u64,
    pub best_val_dice: Option<f64>,
    pub adam: Option<AdamMeta>,
    /// Intensity and spacing preprocessing the model was trained with.
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub config: AdamConfig,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Element = f32> {
    pub meta: CheckpointMeta,
    pub state: ModelState<T>,
    pub adam: Option<AdamState<T>>,
}

#[repr(u8)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Kind {
    Param = 0,
    FrozenParam = 1,
    StatMean = 2,
    StatVar = 3,
    AdamM = 4,
    AdamV = 5,
}

impl Kind {
    fn from_code(c: u8) -> Option<Self> {
        [Kind::Param, Kind::FrozenParam, Kind::StatMean, Kind::StatVar, Kind::AdamM, Kind::AdamV]
            .into_iter()
            .find(|k| *k as u8 == c)
    }
}

fn put_entry<T: Element>(out: &mut Vec<u8>, kind: Kind, name: &str, shape: &[usize], data: &[T]) {
    out.push(kind as u8);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    data.iter().for_each(|v| v.to_le_bytes(out));
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.meta.clone();
        meta.adam = self.adam.as_ref().map(|a| AdamMeta { config: a.config, t: a.t });
        let header = serde_json::to_vec(&meta).expect("metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);

        let mut body = Vec::new();
        let mut count = 0u64;
        for (name, t) in self.state.params.iter() {
            let kind = if t.requires_grad() { Kind::Param } else { Kind::FrozenParam };
            put_entry(&mut body, kind, name, t.shape(), t.data());
            count += 1;
        }
        for (name, s) in self.state.stats.iter() {
            put_entry(&mut body, Kind::StatMean, name, &[s.mean.len()], &s.mean);
            put_entry(&mut body, Kind::StatVar, name, &[s.var.len()], &s.var);
            count += 2;
        }
        if let Some(adam) = &self.adam {
            for (name, m) in &adam.m {
                put_entry(&mut body, Kind::AdamM, name, &[m.len()], m);
                put_entry(&mut body, Kind::AdamV, name, &[m.len()], &adam.v[name]);
                count += 2;
            }
        }
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(TRAILER);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let code = r.take(1)?[0];
        if code != T::DTYPE.code() {
            let found = DType::from_code(code).map_or_else(|| format!("code {}", code), |d| d.to_string());
            return Err(CheckpointError::DtypeMismatch { found, expected: T::DTYPE });
        }
        let header_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("header: {}", e)))?;
        let count = r.u64()?;

        let mut params = ParameterSet::new();
        let mut means: IndexMap<String, Vec<T>> = IndexMap::new();
        let mut stats = StatsSet::new();
        let mut adam_m = IndexMap::new();
        let mut adam_v = IndexMap::new();
        let width = T::DTYPE.size_of();
        for _ in 0..count {
            let kind = Kind::from_code(r.take(1)?[0]).ok_or_else(|| CheckpointError::Corrupt("entry kind".into()))?;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("entry name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .and_then(|n| n.checked_mul(width))
                .ok_or_else(|| CheckpointError::Corrupt(format!("extent overflow in `{}`", name)))?;
            let data: Vec<T> = r.take(n)?.chunks_exact(width).map(T::from_le_slice).collect();
            let corrupt = |what: &str| CheckpointError::Corrupt(format!("{} `{}`", what, name));
            match kind {
                Kind::Param | Kind::FrozenParam => {
                    let t = Tensor::from_vec(data, &shape).map_err(|_| corrupt("bad tensor"))?;
                    params
                        .insert(&name, t.with_requires_grad(kind == Kind::Param))
                        .map_err(|_| corrupt("duplicate parameter"))?;
                }
                Kind::StatMean => {
                    means.insert(name, data);
                }
                Kind::StatVar => {
                    let mean = means.shift_remove(&name).ok_or_else(|| corrupt("variance without mean for"))?;
                    stats.insert(&name, RunningStats { mean, var: data });
                }
                Kind::AdamM => {
                    adam_m.insert(name, data);
                }
                Kind::AdamV => {
                    adam_v.insert(name, data);
                }
            }
        }
        if r.take(4)? != TRAILER {
            return Err(CheckpointError::Corrupt("missing trailer".into()));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes after end marker".into()));
        }
        let adam = match meta.adam {
            Some(AdamMeta { config, t }) => Some(AdamState { config, t, m: adam_m, v: adam_v }),
            None => None,
        };
        Ok(Checkpoint { meta, state: ModelState { params, stats }, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| CatsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CatsError::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
