//! The stochastically updated feature bank.
//!
//! Backpropagating a sequence model through every clip of every video is the
//! main memory cost of end-to-end training. The bank caches clip features per
//! sequence; each training iteration encodes only a short random contiguous
//! window of clips online (carrying gradients) and serves the remaining clips
//! from the cache as constants. After the optimiser step, the online
//! features — computed by the *pre-step* encoder — overwrite their cached
//! rows, so the cache trails the encoder by at most one step per row.
//!
//! The window sampler draws from the RNG only when there is a real choice
//! (at least two valid starts). A window covering the whole sequence is
//! therefore drawn without consuming randomness, which makes bank training
//! with a full-length window replay the exact RNG sequence of end-to-end
//! training — a property the equivalence tests rely on.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::ToyEncoder;
use crate::tensor::{Tape, Tensor, TensorError, ValueId};

/// A contiguous run of clips encoded online this iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OnlineWindow {
    pub start: usize,
    pub len: usize,
}

impl OnlineWindow {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Samples the online window for a sequence of `clip_count` clips. The window
/// length is `min(n_online, clip_count)`; the start is uniform over valid
/// positions, drawn from `rng` only when more than one position exists.
pub fn sample_online_window(
    clip_count: usize,
    n_online: usize,
    rng: &mut ChaCha8Rng,
) -> Result<OnlineWindow, TensorError> {
    if clip_count == 0 || n_online == 0 {
        return Err(TensorError::EmptyAxis {
            op: "sample_online_window",
        });
    }
    let len = n_online.min(clip_count);
    let starts = clip_count - len + 1;
    let start = if starts > 1 {
        rng.gen_range(0..starts)
    } else {
        0
    };
    Ok(OnlineWindow { start, len })
}

/// Cached clip features and their last-refresh iterations for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub features: Tensor,
    /// Iteration at which each clip row was last written (0 = initial fill).
    pub stamps: Vec<u64>,
}

impl BankEntry {
    pub fn clip_count(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Per-sequence cache of clip features, keyed by sequence id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    feature_dim: usize,
    entries: BTreeMap<u32, BankEntry>,
}

impl FeatureBank {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            entries: BTreeMap::new(),
        }
    }

    /// Fills a bank by evaluation-mode encoding of every sequence.
    pub fn from_encoder<'a>(
        encoder: &ToyEncoder,
        sequences: impl IntoIterator<Item = (u32, &'a Tensor)>,
    ) -> Result<Self, TensorError> {
        let mut bank = Self::new(encoder.feature_dim());
        for (id, frames) in sequences {
            let features = encoder.encode_tensor(frames)?;
            bank.insert(id, features)?;
        }
        Ok(bank)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u32) -> Option<&BankEntry> {
        self.entries.get(&id)
    }

    /// Entries in ascending sequence-id order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &BankEntry)> {
        self.entries.iter().map(|(id, e)| (*id, e))
    }

    /// Inserts (or replaces) a sequence's cached features with fresh stamps.
    pub fn insert(&mut self, id: u32, features: Tensor) -> Result<(), TensorError> {
        if features.rank() != 2 || features.shape()[1] != self.feature_dim {
            return Err(TensorError::ShapeMismatch {
                op: "bank_insert",
                detail: format!(
                    "features must be [t x {}], got {:?}",
                    self.feature_dim,
                    features.shape()
                ),
            });
        }
        let stamps = vec![0; features.shape()[0]];
        self.entries.insert(id, BankEntry { features, stamps });
        Ok(())
    }

    /// Inserts an entry verbatim, stamps included (checkpoint restore).
    pub fn restore_entry(&mut self, id: u32, entry: BankEntry) -> Result<(), TensorError> {
        if entry.features.rank() != 2
            || entry.features.shape()[1] != self.feature_dim
            || entry.stamps.len() != entry.features.shape()[0]
        {
            return Err(TensorError::ShapeMismatch {
                op: "bank_restore",
                detail: format!(
                    "entry must be [t x {}] with t stamps, got {:?} with {} stamps",
                    self.feature_dim,
                    entry.features.shape(),
                    entry.stamps.len()
                ),
            });
        }
        self.entries.insert(id, entry);
        Ok(())
    }

    fn checked_entry(
        &self,
        id: u32,
        window: OnlineWindow,
        op: &'static str,
    ) -> Result<&BankEntry, TensorError> {
        let entry = self.entries.get(&id).ok_or(TensorError::IndexOutOfRange {
            op,
            index: id as usize,
            limit: self.entries.len(),
        })?;
        if window.end() > entry.clip_count() || window.len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op,
                index: window.end(),
                limit: entry.clip_count(),
            });
        }
        Ok(entry)
    }

    /// Builds the full feature matrix for a sequence on the tape: cached rows
    /// as constants with the online window overlaid. Gradients flow only into
    /// the online rows.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        id: u32,
        online: ValueId,
        window: OnlineWindow,
    ) -> Result<ValueId, TensorError> {
        let entry = self.checked_entry(id, window, "bank_assemble")?;
        let online_shape = tape.value(online).shape().to_vec();
        if online_shape != [window.len, self.feature_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "bank_assemble",
                detail: format!(
                    "online features {online_shape:?} vs window [{} x {}]",
                    window.len, self.feature_dim
                ),
            });
        }
        let base = tape.leaf(&entry.features);
        tape.assemble_rows(online, base, window.start)
    }

    /// Writes freshly encoded online rows back into the cache, stamping them
    /// with the iteration that produced them.
    pub fn commit(
        &mut self,
        id: u32,
        window: OnlineWindow,
        features: &Tensor,
        iteration: u64,
    ) -> Result<(), TensorError> {
        self.checked_entry(id, window, "bank_commit")?;
        if features.rank() != 2
            || features.shape()[0] != window.len
            || features.shape()[1] != self.feature_dim
        {
            return Err(TensorError::ShapeMismatch {
                op: "bank_commit",
                detail: format!(
                    "committed features {:?} vs window [{} x {}]",
                    features.shape(),
                    window.len,
                    self.feature_dim
                ),
            });
        }
        let entry = self.entries.get_mut(&id).expect("checked above");
        let d = self.feature_dim;
        entry.features.data_mut()[window.start * d..window.end() * d]
            .copy_from_slice(features.data());
        for stamp in &mut entry.stamps[window.start..window.end()] {
            *stamp = iteration;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gaussian;
    use crate::rngs::stream_rng;

    #[test]
    fn window_sampler_conserves_rng_when_window_covers_sequence() {
        let mut a = stream_rng(1, 0);
        let mut b = stream_rng(1, 0);
        let w = sample_online_window(5, 8, &mut a).unwrap();
        assert_eq!(w, OnlineWindow { start: 0, len: 5 });
        let w = sample_online_window(5, 5, &mut a).unwrap();
        assert_eq!(w, OnlineWindow { start: 0, len: 5 });
        // `a` consumed nothing: next draws agree with the untouched `b`.
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn window_sampler_is_uniform_over_valid_starts() {
        let mut rng = stream_rng(7, 0);
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            let w = sample_online_window(7, 4, &mut rng).unwrap();
            assert_eq!(w.len, 4);
            counts[w.start] += 1;
        }
        for &c in &counts {
            assert!((800..1200).contains(&c), "counts {counts:?}");
        }
    }

    #[test]
    fn assemble_serves_cache_and_routes_gradient_to_online_rows() {
        let mut rng = stream_rng(3, 0);
        let enc = ToyEncoder::init(2, 3, 6, 4, &mut rng).unwrap();
        let frames = gaussian(&mut rng, vec![12, 3], 1.0); // 6 clips
        let mut bank =
            FeatureBank::from_encoder(&enc, [(9u32, &frames)]).unwrap();
        let window = OnlineWindow { start: 2, len: 2 };

        let mut tape = Tape::new();
        let staged = enc.stage(&mut tape);
        let slice = frames.slice_rows(4, 4).unwrap(); // frames of clips 2..4
        let online_frames = tape.leaf(&slice);
        let online = enc.encode(&mut tape, &staged, online_frames).unwrap();
        let full = bank.assemble(&mut tape, 9, online, window).unwrap();
        assert_eq!(tape.value(full).shape(), &[6, 4]);
        // Online rows replaced the cached rows bit-exactly (same encoder).
        assert!(tape
            .value(full)
            .bit_eq(&bank.entry(9).unwrap().features));

        let pooled = tape.mean_rows(full).unwrap();
        let flat = tape.reshape(pooled, &[4]).unwrap();
        let loss = tape.cross_entropy(flat, 0).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(online).iter().any(|g| *g != 0.0));

        // Commit stamps only the window.
        let fresh = tape.value(online).clone();
        bank.commit(9, window, &fresh, 41).unwrap();
        let entry = bank.entry(9).unwrap();
        assert_eq!(entry.stamps, vec![0, 0, 41, 41, 0, 0]);
    }

    #[test]
    fn commit_rejects_bad_shapes_and_unknown_ids() {
        let mut bank = FeatureBank::new(4);
        bank.insert(1, Tensor::zeros(vec![3, 4])).unwrap();
        let w = OnlineWindow { start: 0, len: 2 };
        assert!(bank.commit(2, w, &Tensor::zeros(vec![2, 4]), 1).is_err());
        assert!(bank.commit(1, w, &Tensor::zeros(vec![2, 3]), 1).is_err());
        assert!(bank
            .commit(1, OnlineWindow { start: 2, len: 2 }, &Tensor::zeros(vec![2, 4]), 1)
            .is_err());
    }
}
