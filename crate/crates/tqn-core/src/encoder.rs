//! The toy clip encoder: a per-clip two-layer perceptron.
//!
//! Frames arrive as a `[T x d_in]` matrix with `T = t · clip_len`. The
//! encoder views each run of `clip_len` consecutive frames as one clip — a
//! reshape to `[t x (clip_len · d_in)]` — and maps every clip independently
//! through linear → rectifier → linear, equivalent to a width-`clip_len`,
//! stride-`clip_len` one-dimensional convolution. Per-clip independence is a
//! load-bearing contract: a clip's feature depends only on its own frames and
//! the encoder parameters, so cached bank rows can be recomputed exactly and
//! windowed encoding matches whole-sequence encoding bit for bit.

use rand::Rng;

use crate::params::{ParamStore, StagedParams};
use crate::layers::Linear;
use crate::tensor::{Tape, Tensor, TensorError, ValueId};

/// Two-layer per-clip encoder producing `[t x feature_dim]` clip features.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    clip_len: usize,
    input_dim: usize,
    feature_dim: usize,
    store: ParamStore,
    lift: Linear,
    project: Linear,
}

impl ToyEncoder {
    pub fn init<R: Rng>(
        clip_len: usize,
        input_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if clip_len == 0 || input_dim == 0 || hidden_dim == 0 || feature_dim == 0 {
            return Err(TensorError::InvalidArgument {
                op: "toy_encoder",
                detail: "dimensions must be positive".into(),
            });
        }
        let mut store = ParamStore::new("encoder");
        let lift = Linear::init(&mut store, "lift", clip_len * input_dim, hidden_dim, rng);
        let project = Linear::init(&mut store, "project", hidden_dim, feature_dim, rng);
        Ok(Self {
            clip_len,
            input_dim,
            feature_dim,
            store,
            lift,
            project,
        })
    }

    pub fn clip_len(&self) -> usize {
        self.clip_len
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stage(&self, tape: &mut Tape) -> StagedParams {
        self.store.stage(tape)
    }

    /// Number of clips in a frame matrix, which must tile exactly.
    pub fn clip_count(&self, frames: &Tensor) -> Result<usize, TensorError> {
        if frames.rank() != 2 || frames.shape()[1] != self.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "toy_encoder",
                detail: format!(
                    "frames must be [T x {}], got {:?}",
                    self.input_dim,
                    frames.shape()
                ),
            });
        }
        let t_frames = frames.shape()[0];
        if t_frames == 0 || t_frames % self.clip_len != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "toy_encoder",
                detail: format!(
                    "{t_frames} frames do not tile into clips of {}",
                    self.clip_len
                ),
            });
        }
        Ok(t_frames / self.clip_len)
    }

    /// Encodes a leafed frame matrix into clip features on the tape.
    pub fn encode(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        frames: ValueId,
    ) -> Result<ValueId, TensorError> {
        let clips = self.clip_count(tape.value(frames))?;
        let flat = tape.reshape(frames, &[clips, self.clip_len * self.input_dim])?;
        let h = self.lift.apply(tape, staged, flat)?;
        let h = tape.relu(h)?;
        self.project.apply(tape, staged, h)
    }

    /// Evaluation-mode encoding on a scratch tape.
    pub fn encode_tensor(&self, frames: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape);
        let id = tape.leaf(frames);
        let out = self.encode(&mut tape, &staged, id)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gaussian;
    use crate::rngs::stream_rng;

    #[test]
    fn output_shape_and_tiling_checks() {
        let mut rng = stream_rng(2, 0);
        let enc = ToyEncoder::init(4, 3, 8, 5, &mut rng).unwrap();
        let frames = gaussian(&mut rng, vec![12, 3], 1.0);
        let phi = enc.encode_tensor(&frames).unwrap();
        assert_eq!(phi.shape(), &[3, 5]);
        let ragged = gaussian(&mut rng, vec![13, 3], 1.0);
        assert!(enc.encode_tensor(&ragged).is_err());
    }

    #[test]
    fn clips_are_encoded_independently() {
        // Encoding a slice of clips equals slicing the full encoding, bitwise.
        let mut rng = stream_rng(4, 0);
        let enc = ToyEncoder::init(2, 3, 6, 4, &mut rng).unwrap();
        let frames = gaussian(&mut rng, vec![10, 3], 1.0);
        let full = enc.encode_tensor(&frames).unwrap();
        let window = frames.slice_rows(4, 4).unwrap(); // clips 2..4
        let partial = enc.encode_tensor(&window).unwrap();
        assert!(partial.bit_eq(&full.slice_rows(2, 2).unwrap()));
    }

    #[test]
    fn encode_is_differentiable_to_frames_and_params() {
        let mut rng = stream_rng(6, 0);
        let enc = ToyEncoder::init(2, 2, 4, 3, &mut rng).unwrap();
        let frames = gaussian(&mut rng, vec![4, 2], 1.0);
        let mut tape = Tape::new();
        let staged = enc.stage(&mut tape);
        let frames_id = tape.leaf(&frames);
        let phi = enc.encode(&mut tape, &staged, frames_id).unwrap();
        let pooled = tape.mean_rows(phi).unwrap();
        let flat = tape.reshape(pooled, &[3]).unwrap();
        let loss = tape.cross_entropy(flat, 1).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(frames_id).iter().any(|g| *g != 0.0));
    }
}
