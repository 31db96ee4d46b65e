use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowops::{AnchorGeometry, FlowChain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::videodata::{FlowField, FrameSequence, OcclusionMask};

/// K consecutive frames of one sequence with their flows and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple<T> {
    pub frames: Vec<Tensor<T>>,
    pub flows: Vec<FlowField<T>>,
    pub masks: Vec<OcclusionMask>,
    pub forward_flows: Vec<FlowField<T>>,
    pub forward_masks: Vec<OcclusionMask>,
    /// Middle frame, `⌊K/2⌋`.
    pub anchor: usize,
    pub source_id: String,
    /// Index of the first frame within the source sequence.
    pub start: usize,
}

impl<T: Scalar> TrainingTuple<T> {
    pub fn from_sequence(seq: &FrameSequence<T>, start: usize, k: usize) -> Result<Self> {
        if k < 2 || seq.len() < start + k {
            return Err(Error::SequenceTooShort { len: seq.len(), k });
        }
        let w = seq.window(start, k)?;
        Ok(Self {
            frames: w.frames,
            flows: w.flows,
            masks: w.masks,
            forward_flows: w.forward_flows,
            forward_masks: w.forward_masks,
            anchor: k / 2,
            source_id: seq.source_id.clone(),
            start,
        })
    }

    pub fn k(&self) -> usize {
        self.frames.len()
    }

    pub fn chain(&self) -> FlowChain<'_, T> {
        FlowChain {
            backward: &self.flows,
            forward: &self.forward_flows,
        }
    }

    /// Composed flows and common traceability mask on the anchor grid.
    pub fn geometry(&self) -> Result<AnchorGeometry<T>> {
        AnchorGeometry::build(&self.chain(), &self.masks, &self.forward_masks, self.anchor)
    }
}

/// `count` tuples with uniformly random start indices in `[0, len-K]`.
pub fn sample_tuples<T: Scalar>(
    seq: &FrameSequence<T>,
    k: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingTuple<T>>> {
    if k < 2 || seq.len() < k {
        return Err(Error::SequenceTooShort { len: seq.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let start = rng.gen_range(0..=seq.len() - k);
            TrainingTuple::from_sequence(seq, start, k)
        })
        .collect()
}

/// Tuples drawn uniformly over every valid `(sequence, start)` pair of a
/// corpus. Returned as `(sequence index, start)` so callers can share frames.
pub fn sample_corpus_tuples<T: Scalar>(
    corpus: &[FrameSequence<T>],
    k: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let starts: Vec<usize> = corpus
        .iter()
        .map(|s| (s.len() + 1).saturating_sub(k))
        .collect();
    let total: usize = starts.iter().sum();
    if k < 2 || total == 0 {
        return Err(Error::SequenceTooShort {
            len: corpus.iter().map(FrameSequence::len).max().unwrap_or(0),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut r = rng.gen_range(0..total);
            for (i, &n) in starts.iter().enumerate() {
                if r < n {
                    return (i, r);
                }
                r -= n;
            }
            unreachable!("index within total")
        })
        .collect())
}
