//! File and tensor helpers shared across modules.

use std::io::Write;
use std::path::Path;

use mlt_autodiff::Tensor;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(Error::io(dir))?;
    tmp.write_all(bytes).map_err(Error::io(path))?;
    tmp.as_file().sync_all().map_err(Error::io(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    atomic_write(path, &t.to_mlt_bytes())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    Ok(Tensor::from_mlt_bytes(&bytes)?)
}

/// Selects entries along the leading axis.
pub fn take_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    if shape.is_empty() || rows.is_empty() {
        return Err(Error::Shape {
            op: "take_rows",
            expected: vec![rows.len()],
            actual: shape.to_vec(),
        });
    }
    let stride: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * stride);
    for &r in rows {
        if r >= shape[0] {
            return Err(Error::Shape {
                op: "take_rows index",
                expected: vec![shape[0]],
                actual: vec![r],
            });
        }
        data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = rows.len();
    Ok(Tensor::new(out_shape, data)?)
}

/// Concatenates tensors along the leading axis.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Shape {
        op: "concat_rows",
        expected: vec![1],
        actual: vec![0],
    })?;
    let tail = &first.shape()[1..];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.shape().is_empty() || &p.shape()[1..] != tail {
            return Err(Error::Shape {
                op: "concat_rows",
                expected: first.shape().to_vec(),
                actual: p.shape().to_vec(),
            });
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = rows;
    Ok(Tensor::new(shape, data)?)
}
