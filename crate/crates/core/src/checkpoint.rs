//! Binary checkpoint container shared by SLU models and h-vector extractors.
//!
//! ```text
//! "HVSLU1\n"
//! u64 LE   manifest byte length
//! bytes    manifest: "key=value\n" lines, keys sorted
//! u32 LE   record count
//! record:  u32 LE name length, name bytes (UTF-8),
//!          u32 LE rank, rank × u64 LE dims,
//!          product(dims) × f64 LE values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ParamSet, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8] = b"HVSLU1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("trailing bytes after last record")]
    Trailing,
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("manifest key {0:?} missing")]
    MissingKey(String),
    #[error("parameter {0:?} missing from checkpoint")]
    MissingParam(String),
    #[error("parameter {name:?}: checkpoint shape {stored:?}, model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("unexpected parameter {0:?} in checkpoint")]
    ExtraParam(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("non-finite value in parameter {0:?}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.manifest.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::MissingKey(key.to_string()))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| CheckpointError::Manifest(format!("cannot parse {key}={v}")))
    }

    /// Appends every tensor of `params` as a record, names prefixed by `prefix`.
    pub fn add_params<S: Scalar>(&mut self, prefix: &str, params: &ParamSet<S>) {
        for (name, t) in params.iter() {
            self.records.push(Record {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                values: t.values().iter().map(|v| v.to_f64_lossless()).collect(),
            });
        }
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Overwrites every tensor of `params` from the records named
    /// `prefix + name`; shapes must agree.
    pub fn load_params<S: Scalar>(&self, prefix: &str, params: &mut ParamSet<S>) -> Result<(), CheckpointError> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", params.name(id));
            let rec = self.record(&name).ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            let t = params.get_mut(id);
            if rec.shape != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    stored: rec.shape.clone(),
                    expected: t.shape().to_vec(),
                });
            }
            for (dst, &src) in t.values_mut().iter_mut().zip(&rec.values) {
                *dst = S::lit(src);
            }
        }
        Ok(())
    }

    /// Errors on records with `prefix` that `params` does not have.
    pub fn check_no_extra<S: Scalar>(&self, prefix: &str, params: &ParamSet<S>) -> Result<(), CheckpointError> {
        for r in &self.records {
            if let Some(local) = r.name.strip_prefix(prefix) {
                if params.find(local).is_none() {
                    return Err(CheckpointError::ExtraParam(r.name.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for (k, v) in &self.manifest {
            debug_assert!(!k.contains(['=', '\n']) && !v.contains('\n'));
            manifest.push_str(k);
            manifest.push('=');
            manifest.push_str(v);
            manifest.push('\n');
        }
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend((manifest.len() as u64).to_le_bytes());
        out.extend(manifest.as_bytes());
        out.extend((self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend((r.name.len() as u32).to_le_bytes());
            out.extend(r.name.as_bytes());
            out.extend((r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in &r.values {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if !bytes.starts_with(CHECKPOINT_MAGIC) {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            bytes,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let mlen = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?;
        let text = std::str::from_utf8(r.take(mlen)?).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut manifest = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Manifest(format!("line without '=': {line:?}")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()?;
        let mut records = Vec::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?);
            }
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
            let raw = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite(name));
            }
            records.push(Record { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing);
        }
        Ok(Self { manifest, records })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Converts a record to a tensor of the requested scalar type.
pub fn record_tensor<S: Scalar>(r: &Record) -> Tensor<S> {
    Tensor::new(r.shape.clone(), r.values.iter().map(|&v| S::lit(v)).collect()).expect("validated record")
}
