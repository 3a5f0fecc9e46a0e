//! Raw tensor files: a 16-byte header (`LSAT`, rank as u16, five u16
//! extents, all little-endian) followed by little-endian f32 elements.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LSAT";
pub const HEADER_LEN: usize = 16;
pub const MAX_RANK: usize = 5;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > MAX_RANK {
        return Err(Error::Unsupported(format!("tensor rank {} exceeds {MAX_RANK}", shape.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    for i in 0..MAX_RANK {
        let d = shape.get(i).copied().unwrap_or(0);
        let d = u16::try_from(d).map_err(|_| Error::Unsupported(format!("extent {d} does not fit in u16")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_f32_bytes());
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing LSAT header".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let rank = u16_at(4);
    if rank > MAX_RANK {
        return Err(bad(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let shape: Vec<usize> = (0..rank).map(|i| u16_at(6 + 2 * i)).collect();
    let numel: usize = shape.iter().product();
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * numel {
        return Err(bad(format!("expected {} data bytes, found {}", 4 * numel, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Writes through a sibling temp file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
        ));
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
