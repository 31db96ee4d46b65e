//! Checkpoint container:
//!
//! ```text
//! b"FDCKPT\0\0"  u32 version  u32 header_len  header (JSON)  payload
//! ```
//!
//! The payload is every parameter's little-endian elements, in header order.
//! The header records arch, width, seed, dtype, shapes and the payload's
//! SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Arch, NamedParam, NetworkHandle};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Arch,
    width_multiplier: f64,
    checkpoint_id: String,
    seed: u64,
    dtype: String,
    params: Vec<ParamEntry>,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub(super) fn encode<T: Scalar>(net: &NetworkHandle<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(net.num_params() * T::BYTES);
    for p in &net.params {
        for &v in p.value.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        arch: net.arch,
        width_multiplier: net.width_multiplier,
        checkpoint_id: net.checkpoint_id.clone(),
        seed: net.seed,
        dtype: T::DTYPE.to_string(),
        params: net
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_params<S: Scalar, T: Scalar>(
    entries: &[ParamEntry],
    payload: &[u8],
) -> Result<Vec<NamedParam<T>>> {
    let mut at = 0;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        let bytes = payload
            .get(at..at + n * S::BYTES)
            .ok_or_else(|| Error::CorruptFile(format!("payload ends inside {}", e.name)))?;
        let data = bytes
            .chunks_exact(S::BYTES)
            .map(|b| T::lit(S::read_le(b).as_f64()))
            .collect();
        at += n * S::BYTES;
        out.push(NamedParam {
            name: e.name.clone(),
            value: Tensor::from_vec(&e.shape, data)?,
        });
    }
    if at != payload.len() {
        return Err(Error::CorruptFile("trailing payload bytes".into()));
    }
    Ok(out)
}

pub(super) fn decode<T: Scalar>(bytes: &[u8]) -> Result<NetworkHandle<T>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::CorruptFile("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::CorruptFile("header truncated".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::CorruptFile(format!("bad header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    if hex::encode(Sha256::digest(payload)) != header.sha256 {
        return Err(Error::CorruptFile("payload checksum mismatch".into()));
    }
    let params = match header.dtype.as_str() {
        "f32" => read_params::<f32, T>(&header.params, payload)?,
        "f64" => read_params::<f64, T>(&header.params, payload)?,
        other => return Err(Error::CorruptFile(format!("unknown dtype {other}"))),
    };
    let mut net = NetworkHandle {
        arch: header.arch,
        width_multiplier: header.width_multiplier,
        params,
        frozen: header.arch == Arch::Features,
        checkpoint_id: header.checkpoint_id,
        seed: header.seed,
    };
    let expected = super::layout(net.arch, net.width_multiplier);
    let shapes_ok = expected.len() == net.params.len()
        && expected
            .iter()
            .zip(&net.params)
            .all(|((n, s), p)| *n == p.name && s.as_slice() == p.value.shape());
    if !shapes_ok {
        return Err(Error::CorruptFile(format!(
            "parameters do not match the {} layout",
            net.arch
        )));
    }
    if T::DTYPE != header.dtype {
        net.refresh_id();
    }
    Ok(net)
}

pub fn save_checkpoint<T: Scalar>(net: &NetworkHandle<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)?).map_err(|e| Error::io(path, e))
}

/// Loads any checkpoint. Loaded stylizers are unfrozen; callers freeze them.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<NetworkHandle<T>> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_checkpoint_as<T: Scalar>(path: &Path, arch: Arch) -> Result<NetworkHandle<T>> {
    let net = load_checkpoint(path)?;
    net.expect_arch(arch)?;
    Ok(net)
}
