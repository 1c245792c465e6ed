//! `DMEM1` tensor container.
//!
//! Layout: the five ASCII bytes `DMEM1`, then one record per tensor until
//! end of file. A record is the name length as a little-endian `u32`, the
//! UTF-8 name bytes, four little-endian `u64` dims `(n, c, h, w)`, and the
//! row-major payload as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 5] = b"DMEM1";

/// Serialize named tensors into a byte buffer.
pub fn encode<'a, T: Scalar + 'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

fn take<'b>(buf: &mut &'b [u8], n: usize) -> std::result::Result<&'b [u8], String> {
    if buf.len() < n {
        return Err(format!("truncated record: wanted {n} bytes, {} left", buf.len()));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

/// Parse a `DMEM1` byte buffer.
pub fn decode<T: Scalar>(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<T>)>, String> {
    let mut buf = bytes;
    if take(&mut buf, MAGIC.len())? != MAGIC {
        return Err("bad magic, not a DMEM1 container".into());
    }
    let mut out = Vec::new();
    while !buf.is_empty() {
        let len = u32::from_le_bytes(take(&mut buf, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut buf, len)?)
            .map_err(|e| format!("tensor name is not UTF-8: {e}"))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let v = u64::from_le_bytes(take(&mut buf, 8)?.try_into().unwrap());
            *d = usize::try_from(v).map_err(|_| format!("{name}: dim {v} too large"))?;
        }
        let shape = Shape::from_dims(dims);
        let bytes_needed = shape
            .numel()
            .checked_mul(8)
            .ok_or_else(|| format!("{name}: shape {shape} overflows"))?;
        let payload = take(&mut buf, bytes_needed)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        out.push((name, Tensor::from_vec(shape, data).map_err(|e| e.to_string())?));
    }
    Ok(out)
}

pub fn save<'a, T: Scalar + 'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let bytes = encode(tensors);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}
