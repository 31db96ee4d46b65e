//! Middlebury `.flo` container: little-endian magic `202021.25`, `i32` width,
//! `i32` height, then `height·width` interleaved `(u, v)` `f32` pairs,
//! row-major from the top row.

use std::path::Path;

use crate::error::{Error, Result};
use crate::videodata::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;
const HEADER_BYTES: usize = 12;

pub fn encode_flo(flow: &FlowField<f32>) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(HEADER_BYTES + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (&u, &v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField<f32>> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::TruncatedFile {
            expected: HEADER_BYTES,
            found: bytes.len(),
        });
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[4 * i..4 * i + 4]).unwrap();
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let w = i32::from_le_bytes(word(1));
    let h = i32::from_le_bytes(word(2));
    if w <= 0 || h <= 0 {
        return Err(Error::CorruptFile(format!("invalid flow size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = HEADER_BYTES + 8 * w * h;
    if bytes.len() != expected {
        return Err(Error::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for px in bytes[HEADER_BYTES..].chunks_exact(8) {
        u.push(f32::from_le_bytes(px[..4].try_into().unwrap()));
        v.push(f32::from_le_bytes(px[4..].try_into().unwrap()));
    }
    FlowField::from_uv(h, w, u, v)
}

pub fn read_flo(path: &Path) -> Result<FlowField<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}

pub fn write_flo(path: &Path, flow: &FlowField<f32>) -> Result<()> {
    std::fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}
