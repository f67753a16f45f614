//! DATF: a little-endian `f32` matrix container.
//!
//! ```text
//! offset 0   "DATF"            magic, 0x44 0x41 0x54 0x46
//! offset 4   u32 version = 1
//! offset 8   u32 rows
//! offset 12  u32 cols
//! offset 16  rows·cols f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{DatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DATF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Serialises a 2-D tensor. Values are narrowed to `f32`.
pub fn encode_matrix(m: &Tensor) -> Result<Vec<u8>> {
    if m.rank() != 2 {
        return Err(DatError::InvalidArgument(format!("DATF stores matrices, got shape {:?}", m.shape())));
    }
    if let Some(i) = m.data().iter().position(|v| !v.is_finite()) {
        return Err(DatError::NonFinite { op: "write_matrix", index: i });
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let (r32, c32) = match (u32::try_from(rows), u32::try_from(cols)) {
        (Ok(r), Ok(c)) => (r, c),
        _ => return Err(DatError::InvalidArgument(format!("matrix {rows}x{cols} too large for DATF"))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&r32.to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses DATF bytes; `path` only labels errors.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |offset: usize, msg: String| DatError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(err(0, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| err(8, format!("size overflow for {rows}x{cols}")))?;
    if bytes.len() < expected {
        return Err(err(
            bytes.len(),
            format!("truncated payload: {rows}x{cols} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(err(expected, format!("{} trailing bytes after {rows}x{cols} payload", bytes.len() - expected)));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let bytes = encode_matrix(m)?;
    fs::write(path, bytes).map_err(|e| DatError::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| DatError::io(path, e))?;
    decode_matrix(&bytes, path)
}
