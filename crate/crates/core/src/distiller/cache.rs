//! Frozen-network outputs precomputed once per training corpus.
//!
//! One file per sequence:
//!
//! ```text
//! b"FDCACHE\0"  u32 version  u32 header_len  header (JSON)  payload
//! ```
//!
//! The payload holds, per frame, the teacher difference, the frame-local
//! student output and the flow teacher output as little-endian `f32`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::FrozenNets;
use crate::error::{Error, Result};
use crate::losses::ResidualTarget;
use crate::networks::{student_forward, teacher_noflow_forward, teacher_sequence};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::videodata::FrameSequence;

const MAGIC: &[u8; 8] = b"FDCACHE\0";
const CACHE_VERSION: u32 = 1;

/// The three frozen checkpoint ids every entry is keyed on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheIds {
    pub teacher: String,
    pub teacher_noflow: String,
    pub student_baseline: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedFrame {
    /// Flow teacher minus flow-free teacher.
    pub delta_t: Tensor<f32>,
    /// Frame-local baseline student output.
    pub baseline: Tensor<f32>,
    /// Flow teacher output, run recurrently over the whole sequence.
    pub teacher: Tensor<f32>,
}

impl CachedFrame {
    pub fn residual_target(&self) -> ResidualTarget<f32> {
        ResidualTarget {
            delta_t: self.delta_t.clone(),
            baseline: self.baseline.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    ids: CacheIds,
    sequence_id: String,
    frames_sha256: String,
    shape: Vec<usize>,
    frames: usize,
    sha256: String,
}

/// What [`TeacherCache::build`] did per sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub built: usize,
    /// Entries whose checksum failed and were recomputed.
    pub rebuilt_corrupt: usize,
}

#[derive(Debug, Clone)]
pub struct TeacherCache {
    pub ids: CacheIds,
    entries: HashMap<String, Vec<CachedFrame>>,
}

fn frames_digest(seq: &FrameSequence<f32>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for f in &seq.frames {
        buf.clear();
        for &v in f.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

/// Every cached quantity for one sequence, computed on the fly.
pub fn compute_sequence(nets: &FrozenNets, seq: &FrameSequence<f32>) -> Result<Vec<CachedFrame>> {
    let teacher = teacher_sequence(&nets.teacher, &seq.frames, &seq.flows, &seq.masks)?;
    seq.frames
        .iter()
        .zip(teacher)
        .map(|(f, t)| {
            let plain = teacher_noflow_forward(&nets.teacher_noflow, f)?;
            Ok(CachedFrame {
                delta_t: t.sub(&plain),
                baseline: student_forward(&nets.student_baseline, f)?,
                teacher: t,
            })
        })
        .collect()
}

fn file_name(seq_id: &str) -> String {
    let safe: String = seq_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.fdcache")
}

fn encode(ids: &CacheIds, seq: &FrameSequence<f32>, frames: &[CachedFrame]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for f in frames {
        for t in [&f.delta_t, &f.baseline, &f.teacher] {
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
    }
    let header = Header {
        ids: ids.clone(),
        sequence_id: seq.source_id.clone(),
        frames_sha256: frames_digest(seq),
        shape: seq.frames[0].shape().to_vec(),
        frames: frames.len(),
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// `Ok(None)` when the file belongs to other networks or other frames.
fn decode(
    bytes: &[u8],
    ids: &CacheIds,
    seq: &FrameSequence<f32>,
) -> Result<Option<Vec<CachedFrame>>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::CacheCorrupt("not a cache file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Ok(None);
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header: Header = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::CacheCorrupt("header truncated".into()))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| Error::CacheCorrupt(e.to_string())))?;
    let payload = &bytes[16 + hlen..];
    if hex::encode(Sha256::digest(payload)) != header.sha256 {
        return Err(Error::CacheCorrupt(format!(
            "checksum mismatch for {}",
            header.sequence_id
        )));
    }
    if &header.ids != ids
        || header.sequence_id != seq.source_id
        || header.frames != seq.len()
        || header.shape != seq.frames[0].shape()
        || header.frames_sha256 != frames_digest(seq)
    {
        return Ok(None);
    }
    let n: usize = header.shape.iter().product();
    if payload.len() != header.frames * 3 * n * 4 {
        return Err(Error::CacheCorrupt("payload size".into()));
    }
    let mut tensors = payload
        .chunks_exact(n * 4)
        .map(|c| Tensor::from_vec(&header.shape, c.chunks_exact(4).map(f32::read_le).collect()));
    let mut frames = Vec::with_capacity(header.frames);
    for _ in 0..header.frames {
        frames.push(CachedFrame {
            delta_t: tensors.next().unwrap()?,
            baseline: tensors.next().unwrap()?,
            teacher: tensors.next().unwrap()?,
        });
    }
    Ok(Some(frames))
}

impl TeacherCache {
    /// Fills the cache for every sequence, reusing valid files under `dir`
    /// and rewriting stale or corrupt ones.
    pub fn build(
        nets: &FrozenNets,
        corpus: &[FrameSequence<f32>],
        dir: Option<&Path>,
    ) -> Result<(Self, CacheStats)> {
        let ids = nets.ids();
        let mut stats = CacheStats::default();
        let mut entries = HashMap::new();
        if let Some(d) = dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for seq in corpus {
            let path: Option<PathBuf> = dir.map(|d| d.join(file_name(&seq.source_id)));
            let cached = match path.as_ref().filter(|p| p.exists()) {
                Some(p) => {
                    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                    match decode(&bytes, &ids, seq) {
                        Ok(hit) => hit,
                        Err(Error::CacheCorrupt(reason)) => {
                            log::warn!("rebuilding cache entry {}: {reason}", p.display());
                            stats.rebuilt_corrupt += 1;
                            None
                        }
                        Err(e) => return Err(e),
                    }
                }
                None => None,
            };
            let frames = match cached {
                Some(f) => {
                    stats.hits += 1;
                    f
                }
                None => {
                    let f = compute_sequence(nets, seq)?;
                    if let Some(p) = &path {
                        std::fs::write(p, encode(&ids, seq, &f)?).map_err(|e| Error::io(p, e))?;
                    }
                    stats.built += 1;
                    f
                }
            };
            entries.insert(seq.source_id.clone(), frames);
        }
        Ok((Self { ids, entries }, stats))
    }

    pub fn get(&self, sequence_id: &str, frame: usize) -> Result<&CachedFrame> {
        self.entries
            .get(sequence_id)
            .and_then(|f| f.get(frame))
            .ok_or_else(|| Error::CacheMiss(format!("{sequence_id} frame {frame}")))
    }

    /// Errors unless the cache was built for exactly these networks.
    pub fn check_ids(&self, nets: &FrozenNets) -> Result<()> {
        if self.ids != nets.ids() {
            return Err(Error::CacheMiss(
                "cache was built for other frozen networks".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Arch, NetworkHandle};
    use crate::videodata::{synth_sequence, SceneSpec};

    fn nets(seed: u64) -> FrozenNets {
        FrozenNets {
            teacher: NetworkHandle::init(Arch::TeacherFlow, 0.25, seed).freeze(),
            teacher_noflow: NetworkHandle::init(Arch::TeacherNoflow, 0.25, seed + 1).freeze(),
            student_baseline: NetworkHandle::init(Arch::Student, 0.25, seed + 2).freeze(),
        }
    }

    fn corpus() -> Vec<FrameSequence<f32>> {
        (0..2)
            .map(|s| synth_sequence(&SceneSpec::random(16, 16, 3, 1, s)).unwrap())
            .collect()
    }

    #[test]
    fn round_trip_matches_recompute_and_hits() {
        let dir = tempfile::tempdir().unwrap();
        let n = nets(1);
        let c = corpus();
        let (a, s1) = TeacherCache::build(&n, &c, Some(dir.path())).unwrap();
        assert_eq!(s1.built, 2);
        let (b, s2) = TeacherCache::build(&n, &c, Some(dir.path())).unwrap();
        assert_eq!((s2.hits, s2.built), (2, 0));
        let fresh = compute_sequence(&n, &c[1]).unwrap();
        for (i, f) in fresh.iter().enumerate() {
            assert_eq!(b.get(&c[1].source_id, i).unwrap(), f);
            assert_eq!(a.get(&c[1].source_id, i).unwrap(), f);
        }
        assert!(matches!(b.get("nope", 0), Err(Error::CacheMiss(_))));
    }

    #[test]
    fn identical_teachers_give_zero_difference() {
        // A flow teacher that ignores its conditioning channels and otherwise
        // copies the flow-free teacher computes the same function, up to the
        // summation order of the two stem kernels.
        let n = nets(2);
        let mut teacher = NetworkHandle::<f32>::init(Arch::TeacherFlow, 0.25, 0);
        for (dst, src) in teacher.params.iter_mut().zip(&n.teacher_noflow.params) {
            if dst.name == "stem.weight" {
                let (cout, k2) = (src.value.shape()[0], 81);
                let sd = src.value.data();
                dst.value = Tensor::from_fn(dst.value.shape(), |i| {
                    let (o, ci, r) = (i / (7 * k2), (i / k2) % 7, i % k2);
                    if ci < 3 {
                        sd[(o * 3 + ci) * k2 + r]
                    } else {
                        0.0
                    }
                });
                assert_eq!(dst.value.shape()[0], cout);
            } else {
                dst.value = src.value.clone();
            }
        }
        teacher.refresh_id();
        let same = FrozenNets {
            teacher: teacher.freeze(),
            ..n
        };
        for f in compute_sequence(&same, &corpus()[0]).unwrap() {
            assert!(f.delta_t.data().iter().all(|&v| v.abs() <= 1e-5));
        }
    }

    #[test]
    fn swapping_a_teacher_invalidates_entries() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus();
        TeacherCache::build(&nets(3), &c, Some(dir.path())).unwrap();
        let other = FrozenNets {
            teacher_noflow: NetworkHandle::init(Arch::TeacherNoflow, 0.25, 99).freeze(),
            ..nets(3)
        };
        let (cache, stats) = TeacherCache::build(&other, &c, Some(dir.path())).unwrap();
        assert_eq!((stats.hits, stats.built), (0, 2));
        cache.check_ids(&other).unwrap();
        assert!(cache.check_ids(&nets(3)).is_err());
    }

    #[test]
    fn corrupt_files_are_rebuilt() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus();
        let n = nets(4);
        TeacherCache::build(&n, &c, Some(dir.path())).unwrap();
        let p = dir.path().join(file_name(&c[0].source_id));
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        let (cache, stats) = TeacherCache::build(&n, &c, Some(dir.path())).unwrap();
        assert_eq!((stats.rebuilt_corrupt, stats.hits, stats.built), (1, 1, 1));
        assert_eq!(
            cache.get(&c[0].source_id, 2).unwrap(),
            &compute_sequence(&n, &c[0]).unwrap()[2]
        );
    }
}
