//! Binary tensor container used for model persistence.
//!
//! Layout (all integers little-endian `u32`):
//! `"CTCN"`, version, record count, then per record the name length, UTF-8
//! name bytes, rank, one extent per axis and the row-major `f64` payload.

use std::io::{Read, Write};

use thiserror::Error;

use super::{numel, Tensor};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CTCN";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a tensor container (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), ContainerError> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_container<W: Write>(mut w: W, records: &[(String, Tensor)]) -> Result<(), ContainerError> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    put_u32(&mut w, records.len())?;
    for (name, t) in records {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, t.rank())?;
        for &e in t.shape() {
            put_u32(&mut w, e)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, ContainerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = get_u32(&mut r)?;
    if version != CONTAINER_VERSION {
        return Err(ContainerError::Version(version));
    }
    let count = get_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let bad = |msg: String| ContainerError::Record { index, msg };
        let name_len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = get_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| get_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let mut payload = vec![0u8; numel(&shape) * 8];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Finds `name` among loaded records and checks its shape.
pub fn take_tensor(records: &[(String, Tensor)], name: &str, shape: &[usize]) -> Result<Tensor, ContainerError> {
    let t = records
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| ContainerError::Missing(name.to_string()))?;
    if t.shape() != shape {
        return Err(ContainerError::ShapeMismatch {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t)
}
