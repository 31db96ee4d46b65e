//! Video training data: frames, flows, occlusion masks and K-frame tuples.

mod flo;
mod loader;
mod synth;
mod tuples;
mod types;

pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use loader::{export_sequence, load_sequence_dir, read_frame, write_frame, SequenceLayout};
pub use synth::{synth_sequence, SceneSpec, SpriteShape, SpriteSpec};
pub use tuples::{sample_corpus_tuples, sample_tuples, TrainingTuple};
pub use types::{FlowField, OcclusionMask};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An ordered clip with per-step flows and masks in both directions.
///
/// `flows[i]`/`masks[i]` live on frame `i+1` and sample frame `i` (the
/// geometry used to warp the previous stylized frame onto the current one).
/// `forward_flows[i]`/`forward_masks[i]` live on frame `i` and sample frame
/// `i+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence<T> {
    pub frames: Vec<Tensor<T>>,
    pub flows: Vec<FlowField<T>>,
    pub masks: Vec<OcclusionMask>,
    pub forward_flows: Vec<FlowField<T>>,
    pub forward_masks: Vec<OcclusionMask>,
    pub source_id: String,
}

impl<T: Scalar> FrameSequence<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of every frame.
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.frames[0].chw();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::CountMismatch("sequence has no frames".into()));
        }
        for (what, len) in [
            ("flows", self.flows.len()),
            ("masks", self.masks.len()),
            ("forward flows", self.forward_flows.len()),
            ("forward masks", self.forward_masks.len()),
        ] {
            if len + 1 != n {
                return Err(Error::CountMismatch(format!(
                    "{n} frames need {} {what}, found {len}",
                    n - 1
                )));
            }
        }
        let (h, w) = self.size();
        for f in &self.frames {
            if f.shape() != [3, h, w] {
                return Err(Error::shape(format!(
                    "frame of shape {:?} in a 3x{h}x{w} sequence",
                    f.shape()
                )));
            }
            if f.data()
                .iter()
                .any(|&v| !v.is_finite() || v < T::zero() || v > T::one())
            {
                return Err(Error::NonFinite("frame values outside [0,1]".into()));
            }
        }
        for f in self.flows.iter().chain(&self.forward_flows) {
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::shape("flow size differs from frame size"));
            }
        }
        for m in self.masks.iter().chain(&self.forward_masks) {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::shape("mask size differs from frame size"));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> FrameSequence<U> {
        FrameSequence {
            frames: self.frames.iter().map(Tensor::cast).collect(),
            flows: self.flows.iter().map(FlowField::cast).collect(),
            masks: self.masks.clone(),
            forward_flows: self.forward_flows.iter().map(FlowField::cast).collect(),
            forward_masks: self.forward_masks.clone(),
            source_id: self.source_id.clone(),
        }
    }

    /// Frames `start..start+len` with their flows and masks.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::SequenceTooShort {
                len: self.len(),
                k: start + len,
            });
        }
        let steps = start..start + len - 1;
        Ok(Self {
            frames: self.frames[start..start + len].to_vec(),
            flows: self.flows[steps.clone()].to_vec(),
            masks: self.masks[steps.clone()].to_vec(),
            forward_flows: self.forward_flows[steps.clone()].to_vec(),
            forward_masks: self.forward_masks[steps].to_vec(),
            source_id: format!("{}[{start}..{}]", self.source_id, start + len),
        })
    }
}
