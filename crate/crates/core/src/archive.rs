//! Flat binary tensor archive.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of
//! JSON `[{"name", "rows", "cols", "offset"}, …]`, then the tensors as
//! little-endian `f64` in row-major order. `offset` counts values from the
//! start of the data section.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

pub fn encode(tensors: &[(String, Matrix)]) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut header = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        header.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.data().len();
    }
    let json = serde_json::to_vec(&header).map_err(|e| Error::Io(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let bad = |msg: &str| Error::Io(format!("malformed tensor archive: {msg}"));
    if bytes.len() < 8 {
        return Err(bad("missing header length"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Vec<TensorEntry> =
        serde_json::from_slice(&bytes[8..data_start]).map_err(|e| bad(&e.to_string()))?;
    let data = &bytes[data_start..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    header
        .into_iter()
        .map(|e| {
            let len = e.rows.checked_mul(e.cols).ok_or_else(|| bad("tensor size overflows"))?;
            let end = e.offset.checked_add(len).filter(|&end| end <= values.len());
            let end = end.ok_or_else(|| bad(&format!("tensor {} runs past the data", e.name)))?;
            Ok((e.name, Matrix::from_vec(e.rows, e.cols, values[e.offset..end].to_vec())?))
        })
        .collect()
}

pub fn write_archive<W: Write>(w: &mut W, tensors: &[(String, Matrix)]) -> Result<()> {
    w.write_all(&encode(tensors)?)?;
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<(String, Matrix)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}
