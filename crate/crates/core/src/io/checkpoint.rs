//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `"UNXT"`, version `u32`, tensor count `u64`, then per tensor the name
//! length `u32`, UTF-8 name, rank `u32`, `rank` dims as `u64`, and the
//! values as `f32`.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::{ParamRegistry, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UNXT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint holds {found} tensors, model expects {expected}")]
    CountMismatch { expected: usize, found: usize },
    #[error("tensor {index}: checkpoint has `{found}`, model expects `{expected}`")]
    NameMismatch { index: usize, expected: String, found: String },
    #[error("tensor `{name}`: checkpoint dims {found:?}, model expects {expected:?}")]
    DimMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("checkpoint is truncated or malformed: {0}")]
    Truncated(String),
}

pub type Named = (String, Tensor<f32>);

pub fn encode(tensors: &[Named]) -> Result<Vec<u8>, CheckpointError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(CheckpointError::DuplicateName(name.clone()));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!("unexpected end of file reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Named>, CheckpointError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = c.u64("tensor count")?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| CheckpointError::Truncated(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(c.u64("dims")? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = match n {
            Some(n) if dims.iter().all(|&d| d >= 1) && n.checked_mul(4).is_some_and(|b| b <= buf.len()) => n,
            _ => return Err(CheckpointError::Truncated(format!("tensor `{name}` has invalid dims {dims:?}"))),
        };
        let raw = c.take(n * 4, "values")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, Tensor::from_parts(dims, data)));
    }
    if c.pos != buf.len() {
        return Err(CheckpointError::Truncated(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(out)
}

/// Checks that `found` matches the expected names and dims in order. The
/// first differing tensor is reported before any count mismatch.
pub fn validate(expected: &[(String, Vec<usize>)], found: &[Named]) -> Result<(), CheckpointError> {
    for (i, ((en, ed), (fname, ft))) in expected.iter().zip(found).enumerate() {
        if en != fname {
            return Err(CheckpointError::NameMismatch { index: i, expected: en.clone(), found: fname.clone() });
        }
        if ed.as_slice() != ft.dims() {
            return Err(CheckpointError::DimMismatch { name: en.clone(), expected: ed.clone(), found: ft.dims().to_vec() });
        }
    }
    if expected.len() != found.len() {
        return Err(CheckpointError::CountMismatch { expected: expected.len(), found: found.len() });
    }
    Ok(())
}

pub fn save(path: &Path, tensors: &[Named]) -> crate::Result<()> {
    let bytes = encode(tensors)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> crate::Result<Vec<Named>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(decode(&buf)?)
}

pub fn save_params(path: &Path, params: &ParamStore<f32>) -> crate::Result<()> {
    let named: Vec<Named> =
        params.specs().iter().zip(params.tensors()).map(|(s, t)| (s.name.clone(), t.clone())).collect();
    save(path, &named)
}

/// Loads a checkpoint and validates it against the registry of a built model.
pub fn load_params(path: &Path, reg: &ParamRegistry) -> crate::Result<ParamStore<f32>> {
    let found = load(path)?;
    let expected: Vec<(String, Vec<usize>)> = reg.specs().iter().map(|s| (s.name.clone(), s.dims.clone())).collect();
    validate(&expected, &found)?;
    ParamStore::from_tensors(reg, found.into_iter().map(|(_, t)| t).collect())
}
