//! Shared differentiable building blocks: linear maps, layer normalisation,
//! multi-head attention, feed-forward blocks, and the post-norm decoder /
//! encoder layers assembled from them.
//!
//! Layer structs hold [`ParamId`](crate::params::ParamId) handles into their
//! model's [`ParamStore`]; forward methods take the store's staged tape ids,
//! so one staging per tape serves every layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{glorot_uniform, ParamId, ParamStore, StagedParams};
use crate::tensor::{Tape, Tensor, TensorError, ValueId};

/// Default layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Affine map `x · W + b` with Glorot-uniform weights and zero bias.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(&format!("{prefix}.w"), glorot_uniform(rng, d_in, d_out));
        let b = store.add(&format!("{prefix}.b"), Tensor::zeros(vec![d_out]));
        Self { w, b }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        x: ValueId,
    ) -> Result<ValueId, TensorError> {
        let y = tape.matmul(x, staged.id(self.w))?;
        tape.add_bias(y, staged.id(self.b))
    }
}

/// Learnt per-column normalisation with unit gain and zero bias at init.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gain = store.add(
            &format!("{prefix}.gain"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("finite init"),
        );
        let bias = store.add(&format!("{prefix}.bias"), Tensor::zeros(vec![dim]));
        Self { gain, bias }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        x: ValueId,
    ) -> Result<ValueId, TensorError> {
        tape.layer_norm(x, staged.id(self.gain), staged.id(self.bias), LN_EPS)
    }
}

/// Scaled dot-product multi-head attention.
///
/// Queries come from a `query_dim`-wide stream and keys/values from a
/// `key_dim`-wide stream (they coincide for self-attention); all heads share
/// an output projection back to `query_dim`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    heads: usize,
    head_dim: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

/// Attention output plus each head's probability rows (queries × keys).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: ValueId,
    pub head_probs: Vec<ValueId>,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        key_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if heads == 0 || query_dim % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "multi_head_attention",
                detail: format!("model dim {query_dim} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            heads,
            head_dim: query_dim / heads,
            wq: Linear::init(store, &format!("{prefix}.wq"), query_dim, query_dim, rng),
            wk: Linear::init(store, &format!("{prefix}.wk"), key_dim, query_dim, rng),
            wv: Linear::init(store, &format!("{prefix}.wv"), key_dim, query_dim, rng),
            wo: Linear::init(store, &format!("{prefix}.wo"), query_dim, query_dim, rng),
        })
    }

    /// Attends `queries_in` over `keys_in`. `mask` (queries × keys) is added
    /// to every head's scores before the softmax. With `unordered_gather` the
    /// probability-weighted sum over keys accumulates in value order, making
    /// the output invariant to any shared permutation of keys and values —
    /// required when the keys are themselves an unordered query set.
    pub fn forward(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        queries_in: ValueId,
        keys_in: ValueId,
        mask: Option<&Tensor>,
        unordered_gather: bool,
    ) -> Result<AttentionOutput, TensorError> {
        let q = self.wq.apply(tape, staged, queries_in)?;
        let k = self.wk.apply(tape, staged, keys_in)?;
        let v = self.wv.apply(tape, staged, keys_in)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads);
        let mut head_probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let offset = h * self.head_dim;
            let qh = tape.slice_cols(q, offset, self.head_dim)?;
            let kh = tape.slice_cols(k, offset, self.head_dim)?;
            let vh = tape.slice_cols(v, offset, self.head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let scores = match mask {
                Some(m) => tape.add_const(scores, m)?,
                None => scores,
            };
            let probs = tape.softmax_rows(scores)?;
            let ctx = if unordered_gather {
                tape.matmul_unordered(probs, vh)?
            } else {
                tape.matmul(probs, vh)?
            };
            contexts.push(ctx);
            head_probs.push(probs);
        }
        let merged = tape.concat_cols(&contexts)?;
        let output = self.wo.apply(tape, staged, merged)?;
        Ok(AttentionOutput { output, head_probs })
    }
}

/// Two-layer feed-forward block with a rectifier between.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    lift: Linear,
    drop: Linear,
}

impl FeedForward {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            lift: Linear::init(store, &format!("{prefix}.lift"), dim, hidden, rng),
            drop: Linear::init(store, &format!("{prefix}.drop"), hidden, dim, rng),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        x: ValueId,
    ) -> Result<ValueId, TensorError> {
        let h = self.lift.apply(tape, staged, x)?;
        let h = tape.relu(h)?;
        self.drop.apply(tape, staged, h)
    }
}

/// Applies dropout in training mode (rate > 0 and an RNG present); a no-op
/// in evaluation mode.
pub fn maybe_dropout(
    tape: &mut Tape,
    x: ValueId,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ValueId, TensorError> {
    match rng {
        Some(r) if rate > 0.0 => tape.dropout(x, rate, r),
        _ => Ok(x),
    }
}

/// One post-norm decoder layer: self-attention over the query set, then
/// cross-attention into the clip features, then a feed-forward block; each
/// sublayer is followed by residual addition and layer normalisation.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    norm_self: LayerNorm,
    norm_cross: LayerNorm,
    norm_ff: LayerNorm,
    ff: FeedForward,
    dropout: f64,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        feature_dim: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            self_attn: MultiHeadAttention::init(
                store,
                &format!("{prefix}.self_attn"),
                model_dim,
                model_dim,
                heads,
                rng,
            )?,
            cross_attn: MultiHeadAttention::init(
                store,
                &format!("{prefix}.cross_attn"),
                model_dim,
                feature_dim,
                heads,
                rng,
            )?,
            norm_self: LayerNorm::init(store, &format!("{prefix}.norm_self"), model_dim),
            norm_cross: LayerNorm::init(store, &format!("{prefix}.norm_cross"), model_dim),
            norm_ff: LayerNorm::init(store, &format!("{prefix}.norm_ff"), model_dim),
            ff: FeedForward::init(store, &format!("{prefix}.ff"), model_dim, ff_dim, rng),
            dropout,
        })
    }

    /// Runs the layer. `self_mask` is applied to the self-attention scores
    /// (used for causal decoding); cross-attention probability rows for every
    /// head are returned for attention inspection.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        r: ValueId,
        phi: ValueId,
        self_mask: Option<&Tensor>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ValueId, Vec<ValueId>), TensorError> {
        let sa = self
            .self_attn
            .forward(tape, staged, r, r, self_mask, true)?;
        let sa_out = maybe_dropout(tape, sa.output, self.dropout, rng.as_deref_mut())?;
        let r1 = tape.add(r, sa_out)?;
        let r1 = self.norm_self.apply(tape, staged, r1)?;

        let ca = self
            .cross_attn
            .forward(tape, staged, r1, phi, None, false)?;
        let ca_out = maybe_dropout(tape, ca.output, self.dropout, rng.as_deref_mut())?;
        let r2 = tape.add(r1, ca_out)?;
        let r2 = self.norm_cross.apply(tape, staged, r2)?;

        let ff = self.ff.apply(tape, staged, r2)?;
        let ff_out = maybe_dropout(tape, ff, self.dropout, rng)?;
        let r3 = tape.add(r2, ff_out)?;
        let r3 = self.norm_ff.apply(tape, staged, r3)?;
        Ok((r3, ca.head_probs))
    }
}

/// One post-norm encoder layer: self-attention then feed-forward, used by
/// the pooled-token reference models.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    norm_self: LayerNorm,
    norm_ff: LayerNorm,
    ff: FeedForward,
    dropout: f64,
}

impl EncoderLayer {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            self_attn: MultiHeadAttention::init(
                store,
                &format!("{prefix}.self_attn"),
                model_dim,
                model_dim,
                heads,
                rng,
            )?,
            norm_self: LayerNorm::init(store, &format!("{prefix}.norm_self"), model_dim),
            norm_ff: LayerNorm::init(store, &format!("{prefix}.norm_ff"), model_dim),
            ff: FeedForward::init(store, &format!("{prefix}.ff"), model_dim, ff_dim, rng),
            dropout,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        x: ValueId,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId, TensorError> {
        let sa = self.self_attn.forward(tape, staged, x, x, None, true)?;
        let sa_out = maybe_dropout(tape, sa.output, self.dropout, rng.as_deref_mut())?;
        let x1 = tape.add(x, sa_out)?;
        let x1 = self.norm_self.apply(tape, staged, x1)?;

        let ff = self.ff.apply(tape, staged, x1)?;
        let ff_out = maybe_dropout(tape, ff, self.dropout, rng)?;
        let x2 = tape.add(x1, ff_out)?;
        self.norm_ff.apply(tape, staged, x2)
    }
}

/// Strictly lower-triangular-visible causal mask: position i may attend to
/// positions 0..=i. Masked scores receive a large negative offset.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = -1e9;
        }
    }
    Tensor::new(vec![len, len], data).expect("finite mask")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs::stream_rng;

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = stream_rng(3, 0);
        let mut store = ParamStore::new("t");
        let mha = MultiHeadAttention::init(&mut store, "attn", 8, 6, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let queries = tape.leaf(&glorot_uniform(&mut rng, 3, 8));
        let keys = tape.leaf(&glorot_uniform(&mut rng, 5, 6));
        let out = mha
            .forward(&mut tape, &staged, queries, keys, None, false)
            .unwrap();
        assert_eq!(out.head_probs.len(), 2);
        for probs in &out.head_probs {
            let t = tape.value(*probs);
            assert_eq!(t.shape(), &[3, 5]);
            for i in 0..3 {
                let sum: f64 = t.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(tape.value(out.output).shape(), &[3, 8]);
    }

    #[test]
    fn heads_must_divide_model_dim() {
        let mut rng = stream_rng(3, 0);
        let mut store = ParamStore::new("t");
        assert!(MultiHeadAttention::init(&mut store, "attn", 9, 9, 2, &mut rng).is_err());
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut rng = stream_rng(9, 0);
        let mut store = ParamStore::new("t");
        let mha = MultiHeadAttention::init(&mut store, "attn", 4, 4, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let x = tape.leaf(&glorot_uniform(&mut rng, 4, 4));
        let mask = causal_mask(4);
        let out = mha
            .forward(&mut tape, &staged, x, x, Some(&mask), true)
            .unwrap();
        let probs = tape.value(out.head_probs[0]);
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert!(probs.at(i, j) < 1e-12, "future leak at ({i},{j})");
            }
        }
    }

    #[test]
    fn decoder_layer_keeps_query_shape() {
        let mut rng = stream_rng(5, 0);
        let mut store = ParamStore::new("t");
        let layer =
            DecoderLayer::init(&mut store, "layer0", 8, 6, 2, 16, 0.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let r = tape.leaf(&gaussian_like(&mut rng, 4, 8));
        let phi = tape.leaf(&gaussian_like(&mut rng, 7, 6));
        let (out, probs) = layer
            .forward(&mut tape, &staged, r, phi, None, None)
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 8]);
        assert_eq!(probs.len(), 2);
        assert_eq!(tape.value(probs[0]).shape(), &[4, 7]);
    }

    fn gaussian_like(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize) -> Tensor {
        crate::params::gaussian(rng, vec![r, c], 0.5)
    }
}
