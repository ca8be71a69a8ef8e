//! "FSVL" volume container: magic, dims as 3 x u64 LE, spacing as
//! 3 x f32 LE, then the f32 LE voxel payload row-major. A 32^3 volume is
//! exactly 40 + 4 * 32768 bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::Volume;

const MAGIC: &[u8; 4] = b"FSVL";
const HEADER_LEN: usize = 4 + 3 * 8 + 3 * 4;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.values.len());
    out.extend_from_slice(MAGIC);
    for &d in &v.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &s in &v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &x in &v.values {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "volume truncated: {} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected \"FSVL\"",
            &bytes[..4]
        )));
    }
    let mut at = 4usize;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let raw = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        *d = usize::try_from(raw)
            .map_err(|_| Error::Format(format!("volume dim {raw} overflows this platform")))?;
        at += 8;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        at += 4;
    }
    let numel = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .and_then(|p| p.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("volume dims {dims:?} overflow")))?
        / 4;
    let want = HEADER_LEN + 4 * numel;
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "volume payload is {} bytes, dims {:?} require {}",
            bytes.len() - HEADER_LEN,
            dims,
            want - HEADER_LEN
        )));
    }
    let mut values = Vec::with_capacity(numel);
    for c in bytes[HEADER_LEN..].chunks_exact(4) {
        values.push(f32::from_le_bytes(c.try_into().unwrap()));
    }
    Volume::with_values(dims, spacing, values)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(Error::from)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read volume {}: {e}", path.display())))?;
    decode_volume(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
