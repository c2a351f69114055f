//! The temporal query network: learnt queries decoded against clip features.
//!
//! A fixed set of learnt query vectors — one per factorised attribute group
//! plus one for the overall category — is passed through a stack of post-norm
//! decoder layers. Each layer lets the queries exchange information through
//! self-attention, attend into the clip features through cross-attention, and
//! pass through a feed-forward block. No positional encoding is added on
//! either stream: queries are a set, and the temporal structure of the clips
//! is left to the attention pattern. Each query's final response feeds its
//! own linear classifier over that query's answer set, and training minimises
//! the unweighted sum of the per-query cross-entropies.

use rand_chacha::ChaCha8Rng;

use crate::factorization::FactorizationSchema;
use crate::layers::{maybe_dropout, DecoderLayer, Linear};
use crate::params::{gaussian, ParamId, ParamStore, StagedParams};
use crate::tensor::{argmax, Tape, Tensor, TensorError, ValueId};

/// Standard deviation of the query-embedding initialisation.
pub const QUERY_EMBED_STD: f64 = 0.02;

/// Architecture of a [`TqnModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct TqnConfig {
    /// Clip feature width d (the cross-attention key/value input).
    pub feature_dim: usize,
    /// Query embedding and decoder width d_q.
    pub model_dim: usize,
    /// Number of decoder layers M.
    pub layers: usize,
    /// Attention heads per layer H.
    pub heads: usize,
    /// Feed-forward hidden width.
    pub ff_dim: usize,
    /// Dropout on each sublayer output (training only).
    pub dropout_layer: f64,
    /// Dropout applied once to the final responses (training only).
    pub dropout_output: f64,
    /// Answer-set size per query: one entry per factorised query (its arity,
    /// null slot included) followed by the category query (class count).
    pub head_sizes: Vec<usize>,
}

impl TqnConfig {
    /// The standard configuration for a schema: one query per attribute group
    /// (answer sets include the null slot) plus the category query.
    pub fn for_schema(
        schema: &FactorizationSchema,
        feature_dim: usize,
        model_dim: usize,
        layers: usize,
        heads: usize,
        ff_dim: usize,
        dropout_layer: f64,
        dropout_output: f64,
    ) -> Self {
        let mut head_sizes = schema.arities();
        head_sizes.push(schema.class_count());
        Self {
            feature_dim,
            model_dim,
            layers,
            heads,
            ff_dim,
            dropout_layer,
            dropout_output,
            head_sizes,
        }
    }

    /// Total query count (factorised queries plus the category query).
    pub fn query_count(&self) -> usize {
        self.head_sizes.len()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |detail: String| TensorError::InvalidArgument {
            op: "tqn_config",
            detail,
        };
        if self.head_sizes.len() < 2 {
            return Err(bad("need at least one factorised query plus the category query".into()));
        }
        if self.head_sizes.iter().any(|&n| n < 2) {
            return Err(bad("every answer set needs at least two entries".into()));
        }
        if self.feature_dim == 0 || self.model_dim == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(bad("dimensions must be positive".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(bad(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        for rate in [self.dropout_layer, self.dropout_output] {
            if !(0.0..1.0).contains(&rate) {
                return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct TqnForward {
    /// Final query responses r^(M), `[K x d_q]`.
    pub responses: ValueId,
    /// Responses after the single output dropout (identical to `responses`
    /// in evaluation mode); classifier input.
    pub classifier_input: ValueId,
    /// Cross-attention probabilities, `[layer][head]`, each `[K x t]`.
    pub attention: Vec<Vec<ValueId>>,
}

/// Cross-attention maps of one sequence, exported for inspection.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    /// `[layer][head]`, each `[K x t]` with rows summing to one.
    pub per_layer_head: Vec<Vec<Tensor>>,
    /// Mean over layers and heads, `[K x t]`.
    pub aggregate: Tensor,
}

impl AttentionMap {
    fn from_tensors(per_layer_head: Vec<Vec<Tensor>>) -> Self {
        let first = &per_layer_head[0][0];
        let (k, t) = (first.shape()[0], first.shape()[1]);
        let mut acc = vec![0.0; k * t];
        let mut count = 0usize;
        for layer in &per_layer_head {
            for head in layer {
                for (a, v) in acc.iter_mut().zip(head.data()) {
                    *a += v;
                }
                count += 1;
            }
        }
        for a in &mut acc {
            *a /= count as f64;
        }
        let aggregate = Tensor::new(vec![k, t], acc).expect("finite attention");
        Self {
            per_layer_head,
            aggregate,
        }
    }

    /// The clip each query attends to most, from the aggregate map.
    pub fn argmax_clip(&self, query: usize) -> usize {
        argmax(self.aggregate.row(query))
    }

    /// Largest deviation of any probability row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for layer in &self.per_layer_head {
            for head in layer {
                for i in 0..head.shape()[0] {
                    let sum: f64 = head.row(i).iter().sum();
                    worst = worst.max((sum - 1.0).abs());
                }
            }
        }
        worst
    }
}

/// Per-sequence prediction of the query network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TqnPrediction {
    /// Argmax of the category query's head.
    pub class_index: usize,
    /// Per-factorised-query argmax answer slots (local indices).
    pub per_query_locals: Vec<usize>,
}

/// Learnt queries, decoder stack, and per-query classifier heads.
#[derive(Debug, Clone)]
pub struct TqnModel {
    config: TqnConfig,
    store: ParamStore,
    query_embed: ParamId,
    layers: Vec<DecoderLayer>,
    heads: Vec<Linear>,
}

impl TqnModel {
    /// Initialises all parameters: Gaussian query embeddings, Glorot-uniform
    /// weights, zero biases, unit layer-norm gains.
    pub fn init(config: TqnConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        config.validate()?;
        let mut store = ParamStore::new("model");
        let k = config.query_count();
        let query_embed = store.add(
            "query_embed",
            gaussian(rng, vec![k, config.model_dim], QUERY_EMBED_STD),
        );
        let mut layers = Vec::with_capacity(config.layers);
        for m in 0..config.layers {
            layers.push(DecoderLayer::init(
                &mut store,
                &format!("layer{m}"),
                config.model_dim,
                config.feature_dim,
                config.heads,
                config.ff_dim,
                config.dropout_layer,
                rng,
            )?);
        }
        let heads = config
            .head_sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| Linear::init(&mut store, &format!("head{i}"), config.model_dim, n, rng))
            .collect();
        Ok(Self {
            config,
            store,
            query_embed,
            layers,
            heads,
        })
    }

    pub fn config(&self) -> &TqnConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Leafs all parameters onto a tape.
    pub fn stage(&self, tape: &mut Tape) -> StagedParams {
        self.store.stage(tape)
    }

    /// Decodes the query set against clip features `phi` (`[t x d]` leaf).
    /// Training mode (an RNG present) applies dropout; evaluation is
    /// deterministic.
    pub fn forward(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        phi: ValueId,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TqnForward, TensorError> {
        let phi_shape = tape.value(phi).shape().to_vec();
        if phi_shape.len() != 2 || phi_shape[1] != self.config.feature_dim {
            return Err(TensorError::ShapeMismatch {
                op: "tqn_forward",
                detail: format!(
                    "clip features must be [t x {}], got {phi_shape:?}",
                    self.config.feature_dim
                ),
            });
        }
        let mut r = staged.id(self.query_embed);
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, probs) =
                layer.forward(tape, staged, r, phi, None, rng.as_deref_mut())?;
            r = next;
            attention.push(probs);
        }
        let classifier_input = maybe_dropout(tape, r, self.config.dropout_output, rng)?;
        Ok(TqnForward {
            responses: r,
            classifier_input,
            attention,
        })
    }

    /// Applies each query's classifier head to its response row, yielding one
    /// `[1 x n_i]` logit row per query.
    pub fn classify(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        classifier_input: ValueId,
    ) -> Result<Vec<ValueId>, TensorError> {
        let mut logits = Vec::with_capacity(self.heads.len());
        for (i, head) in self.heads.iter().enumerate() {
            let row = tape.slice_rows(classifier_input, i, 1)?;
            logits.push(head.apply(tape, staged, row)?);
        }
        Ok(logits)
    }

    /// Full training loss for one sequence: forward, classify, and the
    /// multi-task sum of per-query cross-entropies.
    pub fn loss(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        phi: ValueId,
        targets: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId, TensorError> {
        let fwd = self.forward(tape, staged, phi, rng)?;
        let logits = self.classify(tape, staged, fwd.classifier_input)?;
        multi_task_loss(tape, &logits, targets)
    }

    /// Evaluation-mode prediction from raw clip features.
    pub fn predict(&self, phi: &Tensor) -> Result<TqnPrediction, TensorError> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape);
        let phi = tape.leaf(phi);
        let fwd = self.forward(&mut tape, &staged, phi, None)?;
        let logits = self.classify(&mut tape, &staged, fwd.classifier_input)?;
        let rows: Vec<&[f64]> = logits.iter().map(|&l| tape.value(l).data()).collect();
        let class_index = argmax(rows[rows.len() - 1]);
        let per_query_locals = rows[..rows.len() - 1].iter().map(|r| argmax(r)).collect();
        Ok(TqnPrediction {
            class_index,
            per_query_locals,
        })
    }

    /// Predicted category index, checking that the model was built for this
    /// schema's class count.
    pub fn predict_category(
        &self,
        schema: &FactorizationSchema,
        phi: &Tensor,
    ) -> Result<usize, TensorError> {
        let global = *self.config.head_sizes.last().expect("validated config");
        if global != schema.class_count() {
            return Err(TensorError::InvalidArgument {
                op: "predict_category",
                detail: format!(
                    "category head has {global} classes, schema has {}",
                    schema.class_count()
                ),
            });
        }
        Ok(self.predict(phi)?.class_index)
    }

    /// Evaluation-mode cross-attention maps for one sequence.
    pub fn extract_attention(&self, phi: &Tensor) -> Result<AttentionMap, TensorError> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape);
        let phi = tape.leaf(phi);
        let fwd = self.forward(&mut tape, &staged, phi, None)?;
        let per_layer_head: Vec<Vec<Tensor>> = fwd
            .attention
            .iter()
            .map(|layer| layer.iter().map(|&p| tape.value(p).clone()).collect())
            .collect();
        Ok(AttentionMap::from_tensors(per_layer_head))
    }
}

/// Unweighted sum of per-query cross-entropies. The sum accumulates in value
/// order, so reordering (queries, logits, targets) together leaves the loss
/// bit-identical.
pub fn multi_task_loss(
    tape: &mut Tape,
    logits: &[ValueId],
    targets: &[usize],
) -> Result<ValueId, TensorError> {
    if logits.len() != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "multi_task_loss",
            detail: format!("{} logit rows vs {} targets", logits.len(), targets.len()),
        });
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, &t) in logits.iter().zip(targets) {
        terms.push(tape.cross_entropy(l, t)?);
    }
    tape.sum_scalars_unordered(&terms)
}
