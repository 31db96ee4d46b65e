//! Training and validation corpora, and the style image.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::videodata::{
    load_sequence_dir, read_frame, synth_sequence, FlowField, FrameSequence, OcclusionMask,
    SceneSpec, SequenceLayout,
};

/// Where sequences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Procedural scenes; scene `i` is drawn from `seed + i`.
    Synthetic {
        sequences: usize,
        frames: usize,
        width: usize,
        height: usize,
        sprites: usize,
        seed: u64,
    },
    /// Every subdirectory of `root` holding `frames/`, `flow/` and
    /// `occlusions/`.
    Directory { root: PathBuf },
}

impl DatasetSpec {
    pub fn scene_specs(&self) -> Vec<SceneSpec> {
        match self {
            DatasetSpec::Synthetic {
                sequences,
                frames,
                width,
                height,
                sprites,
                seed,
            } => (0..*sequences as u64)
                .map(|i| SceneSpec::random(*width, *height, *frames, *sprites, seed + i))
                .collect(),
            DatasetSpec::Directory { .. } => Vec::new(),
        }
    }
}

/// Loads or renders every sequence. Directory sequences are cropped to the
/// largest top-left region whose sides are multiples of 4.
pub fn build_corpus(spec: &DatasetSpec) -> Result<Vec<FrameSequence<f32>>> {
    let corpus = match spec {
        DatasetSpec::Synthetic { width, height, .. } => {
            if width % 4 != 0 || height % 4 != 0 {
                return Err(Error::ConfigInvalid {
                    key: "dataset".into(),
                    reason: format!(
                        "synthetic frames must have sides divisible by 4, got {width}x{height}"
                    ),
                });
            }
            spec.scene_specs()
                .iter()
                .map(synth_sequence)
                .collect::<Result<Vec<_>>>()?
        }
        DatasetSpec::Directory { root } => {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
                .map_err(|e| Error::io(root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("frames").is_dir())
                .collect();
            dirs.sort();
            dirs.iter()
                .map(|d| {
                    load_sequence_dir(d, SequenceLayout::TripletDirs)
                        .map(|s| crop_to_multiple_of_4(&s))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    if corpus.is_empty() {
        return Err(Error::CountMismatch("dataset holds no sequences".into()));
    }
    Ok(corpus)
}

fn crop_tensor(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (c, _, sw) = t.chw();
    let sh = t.shape()[1];
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        t.data()[(ch * sh + rest / w) * sw + rest % w]
    })
}

fn crop_mask(m: &OcclusionMask, h: usize, w: usize) -> OcclusionMask {
    let data = (0..h * w).map(|i| u8::from(m.get(i / w, i % w))).collect();
    OcclusionMask::from_vec(h, w, data).expect("crop fits")
}

fn crop_flow(f: &FlowField<f32>, h: usize, w: usize) -> FlowField<f32> {
    FlowField::from_tensor(crop_tensor(f.as_tensor(), h, w)).expect("two channels")
}

fn crop_to_multiple_of_4(seq: &FrameSequence<f32>) -> FrameSequence<f32> {
    let (h0, w0) = seq.size();
    let (h, w) = (h0 / 4 * 4, w0 / 4 * 4);
    if (h, w) == (h0, w0) {
        return seq.clone();
    }
    FrameSequence {
        frames: seq.frames.iter().map(|f| crop_tensor(f, h, w)).collect(),
        flows: seq.flows.iter().map(|f| crop_flow(f, h, w)).collect(),
        masks: seq.masks.iter().map(|m| crop_mask(m, h, w)).collect(),
        forward_flows: seq
            .forward_flows
            .iter()
            .map(|f| crop_flow(f, h, w))
            .collect(),
        forward_masks: seq
            .forward_masks
            .iter()
            .map(|m| crop_mask(m, h, w))
            .collect(),
        source_id: seq.source_id.clone(),
    }
}

/// The style reference: an image file, or a procedural painting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    #[serde(default)]
    pub image: Option<PathBuf>,
    pub seed: u64,
    pub size: usize,
}

impl StyleSpec {
    pub fn load(&self) -> Result<Tensor<f32>> {
        match &self.image {
            Some(p) => read_frame(p),
            None => Ok(procedural_style(self.size, self.seed)),
        }
    }

    pub fn source(&self) -> Option<&Path> {
        self.image.as_deref()
    }
}

/// Bold oriented strokes over a few flat colour fields, from a fixed palette
/// drawn by `seed`.
pub fn procedural_style(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette: Vec<[f64; 3]> = (0..4).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.15..0.45);
            (
                angle.cos() * freq,
                angle.sin() * freq,
                rng.gen_range(0.0..6.28),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let plane = size * size;
    Tensor::from_fn(&[3, size, size], |i| {
        let (ch, p) = (i / plane, i % plane);
        let (y, x) = ((p / size) as f64, (p % size) as f64);
        let field =
            ((x / size as f64 * 2.0).floor() + (y / size as f64 * 2.0).floor() * 2.0) as usize;
        let mut v = palette[field % palette.len()][ch] * 0.6;
        for (k, &(fx, fy, phase, amp)) in waves.iter().enumerate() {
            let s = (fx * x + fy * y + phase).sin();
            let stroke = if s > 0.3 { 1.0 } else { 0.0 };
            v += 0.4 * amp * stroke * palette[(k + 1) % palette.len()][ch];
        }
        v.clamp(0.0, 1.0) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let spec = DatasetSpec::Synthetic {
            sequences: 2,
            frames: 4,
            width: 16,
            height: 12,
            sprites: 1,
            seed: 3,
        };
        let a = build_corpus(&spec).unwrap();
        assert_eq!(a.len(), 2);
        assert_ne!(a[0].source_id, a[1].source_id);
        assert_eq!(a, build_corpus(&spec).unwrap());
    }

    #[test]
    fn odd_synthetic_sizes_are_rejected() {
        let spec = DatasetSpec::Synthetic {
            sequences: 1,
            frames: 4,
            width: 18,
            height: 12,
            sprites: 1,
            seed: 3,
        };
        assert!(matches!(
            build_corpus(&spec),
            Err(Error::ConfigInvalid { .. })
        ));
    }

    #[test]
    fn directory_sequences_are_cropped() {
        let dir = tempfile::tempdir().unwrap();
        let seq: FrameSequence<f32> = synth_sequence(&SceneSpec::random(18, 14, 3, 1, 5)).unwrap();
        crate::videodata::export_sequence(&seq, &dir.path().join("clip")).unwrap();
        let corpus = build_corpus(&DatasetSpec::Directory {
            root: dir.path().to_path_buf(),
        })
        .unwrap();
        assert_eq!(corpus[0].size(), (12, 16));
        assert_eq!(corpus[0].frames[1].data()[0], seq.frames[1].data()[0]);
        corpus[0].validate().unwrap();
    }

    #[test]
    fn procedural_style_is_textured_and_seeded() {
        let a = procedural_style(32, 1);
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert_eq!(a, procedural_style(32, 1));
        assert_ne!(a, procedural_style(32, 2));
        let mean = a.mean();
        let var = a.map(|v| (v - mean) * (v - mean)).mean();
        assert!(var > 0.01);
    }
}
