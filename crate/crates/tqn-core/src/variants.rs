//! The five supervision strategies under one training interface.
//!
//! All variants share the clip encoder, the optimiser, and the two-stage
//! schedule; they differ only in how clip features are turned into a loss and
//! a predicted category:
//!
//! * `tqn` — the query decoder with factorised heads (the model under test);
//! * `avgpool` — mean-pool over clips, one N-way softmax;
//! * `selfattn_cls` — a learnt `cls` token attending over clips, N-way softmax;
//! * `multilabel_bce` — the same `cls` backbone with one sigmoid per
//!   attribute (null slots included), classes scored by probability product;
//! * `seq2seq` — an autoregressive decoder emitting the attribute sequence,
//!   classes recovered by nearest edit distance.
//!
//! Every model applies the same dropout discipline: the layer rate inside
//! attention blocks and the output rate once before its classifier.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{TqnConfig, TqnModel, QUERY_EMBED_STD};
use crate::factorization::{FactorizationError, FactorizationSchema};
use crate::layers::{causal_mask, maybe_dropout, DecoderLayer, EncoderLayer, Linear};
use crate::params::{gaussian, ParamStore, StagedParams};
use crate::tensor::{argmax, Tape, Tensor, TensorError, ValueId};

#[derive(Debug, Error)]
pub enum VariantError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schema(#[from] FactorizationError),
    #[error("variant: {0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Tqn,
    AvgPool,
    SelfAttnCls,
    MultiLabelBce,
    Seq2Seq,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::Tqn,
        VariantKind::AvgPool,
        VariantKind::SelfAttnCls,
        VariantKind::MultiLabelBce,
        VariantKind::Seq2Seq,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::Tqn => "tqn",
            VariantKind::AvgPool => "avgpool",
            VariantKind::SelfAttnCls => "selfattn_cls",
            VariantKind::MultiLabelBce => "multilabel_bce",
            VariantKind::Seq2Seq => "seq2seq",
        }
    }

    pub fn parse(s: &str) -> Result<Self, VariantError> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                VariantError::Other(format!(
                    "unknown variant `{s}` (expected one of {})",
                    Self::ALL
                        .iter()
                        .map(|k| k.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-sequence supervision in every representation a variant might need,
/// derived once from the category index.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTarget {
    pub class_index: usize,
    /// Per-query local answer slots followed by the category index — the
    /// query-decoder head targets.
    pub head_targets: Vec<usize>,
    /// 0/1 indicator per attribute slot (nulls included).
    pub multilabel: Vec<f64>,
    /// `BOS, a_1 … a_k, EOS` token ids for sequence decoding.
    pub tokens: Vec<u32>,
}

impl SequenceTarget {
    pub fn for_class(
        schema: &FactorizationSchema,
        class_index: usize,
    ) -> Result<Self, FactorizationError> {
        let mut head_targets = schema.local_indices(class_index)?;
        head_targets.push(class_index);
        let multilabel = schema.multilabel_bits(class_index)?;
        let vocab = SeqVocab::for_schema(schema);
        let mut tokens = vec![vocab.bos];
        tokens.extend(schema.attribute_sequence(class_index)?);
        tokens.push(vocab.eos);
        Ok(Self {
            class_index,
            head_targets,
            multilabel,
            tokens,
        })
    }
}

/// Token-id layout for the sequence decoder: attribute ids verbatim, then
/// begin/end markers after the largest attribute id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqVocab {
    pub bos: u32,
    pub eos: u32,
    pub size: usize,
}

impl SeqVocab {
    pub fn for_schema(schema: &FactorizationSchema) -> Self {
        let max_att = schema.max_attribute_id();
        Self {
            bos: max_att + 1,
            eos: max_att + 2,
            size: max_att as usize + 3,
        }
    }
}

/// Mean-pool + linear head.
#[derive(Debug)]
pub struct AvgPoolModel {
    store: ParamStore,
    head: Linear,
    dropout_output: f64,
}

impl AvgPoolModel {
    fn init(
        schema: &FactorizationSchema,
        config: &TqnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, VariantError> {
        let mut store = ParamStore::new("avgpool");
        let head = Linear::init(
            &mut store,
            "head",
            config.feature_dim,
            schema.class_count(),
            rng,
        );
        Ok(Self {
            store,
            head,
            dropout_output: config.dropout_output,
        })
    }

    fn class_logits(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        phi: ValueId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId, TensorError> {
        let pooled = tape.mean_rows(phi)?;
        let pooled = maybe_dropout(tape, pooled, self.dropout_output, rng)?;
        self.head.apply(tape, staged, pooled)
    }
}

/// Learnt `cls` token + self-attention encoder backbone, shared by the
/// multi-class and multi-label heads.
#[derive(Debug)]
struct ClsBackbone {
    input_proj: Linear,
    layers: Vec<EncoderLayer>,
    dropout_output: f64,
}

impl ClsBackbone {
    fn init(
        store: &mut ParamStore,
        config: &TqnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, VariantError> {
        store.add(
            "cls",
            gaussian(rng, vec![1, config.model_dim], QUERY_EMBED_STD),
        );
        let input_proj = Linear::init(
            store,
            "input_proj",
            config.feature_dim,
            config.model_dim,
            rng,
        );
        let mut layers = Vec::with_capacity(config.layers);
        for m in 0..config.layers {
            layers.push(EncoderLayer::init(
                store,
                &format!("layer{m}"),
                config.model_dim,
                config.heads,
                config.ff_dim,
                config.dropout_layer,
                rng,
            )?);
        }
        Ok(Self {
            input_proj,
            layers,
            dropout_output: config.dropout_output,
        })
    }

    /// Returns the encoded `cls` row `[1 x model_dim]` (output dropout
    /// applied) and the full token matrix `[(t+1) x model_dim]`.
    fn encode(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        staged: &StagedParams,
        phi: ValueId,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ValueId, ValueId), TensorError> {
        let cls = staged.id(store.param_id("cls").expect("cls registered"));
        let projected = self.input_proj.apply(tape, staged, phi)?;
        let mut x = tape.concat_rows(&[cls, projected])?;
        for layer in &self.layers {
            x = layer.forward(tape, staged, x, rng.as_deref_mut())?;
        }
        let cls_out = tape.slice_rows(x, 0, 1)?;
        let cls_out = maybe_dropout(tape, cls_out, self.dropout_output, rng)?;
        Ok((cls_out, x))
    }
}

/// `cls` backbone + N-way softmax.
#[derive(Debug)]
pub struct SelfAttnClsModel {
    store: ParamStore,
    backbone: ClsBackbone,
    head: Linear,
}

impl SelfAttnClsModel {
    fn init(
        schema: &FactorizationSchema,
        config: &TqnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, VariantError> {
        let mut store = ParamStore::new("selfattn_cls");
        let backbone = ClsBackbone::init(&mut store, config, rng)?;
        let head = Linear::init(
            &mut store,
            "head",
            config.model_dim,
            schema.class_count(),
            rng,
        );
        Ok(Self {
            store,
            backbone,
            head,
        })
    }

    fn class_logits(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        phi: ValueId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId, TensorError> {
        let (cls_out, _) = self.backbone.encode(&self.store, tape, staged, phi, rng)?;
        self.head.apply(tape, staged, cls_out)
    }

    /// Token matrix after the encoder stack (eval diagnostics).
    pub fn encode_tokens(&self, phi: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let staged = self.store.stage(&mut tape);
        let phi = tape.leaf(phi);
        let (_, tokens) = self.backbone.encode(&self.store, &mut tape, &staged, phi, None)?;
        Ok(tape.value(tokens).clone())
    }
}

/// `cls` backbone + one sigmoid per attribute slot.
#[derive(Debug)]
pub struct MultiLabelModel {
    store: ParamStore,
    backbone: ClsBackbone,
    head: Linear,
    arities: Vec<usize>,
}

impl MultiLabelModel {
    fn init(
        schema: &FactorizationSchema,
        config: &TqnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, VariantError> {
        let mut store = ParamStore::new("multilabel_bce");
        let backbone = ClsBackbone::init(&mut store, config, rng)?;
        let head = Linear::init(
            &mut store,
            "head",
            config.model_dim,
            schema.total_arity(),
            rng,
        );
        Ok(Self {
            store,
            backbone,
            head,
            arities: schema.arities(),
        })
    }

    fn attribute_logits(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        phi: ValueId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId, TensorError> {
        let (cls_out, _) = self.backbone.encode(&self.store, tape, staged, phi, rng)?;
        self.head.apply(tape, staged, cls_out)
    }

    /// Splits flat sigmoid probabilities into per-query vectors.
    pub fn split_probs(&self, probs: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.arities.len());
        let mut offset = 0;
        for &n in &self.arities {
            out.push(probs[offset..offset + n].to_vec());
            offset += n;
        }
        out
    }
}

/// Autoregressive attribute-sequence decoder.
#[derive(Debug)]
pub struct Seq2SeqModel {
    store: ParamStore,
    layers: Vec<DecoderLayer>,
    head: Linear,
    vocab: SeqVocab,
    /// Greedy decoding emits at most this many tokens after BOS.
    decode_cap: usize,
    dropout_output: f64,
}

impl Seq2SeqModel {
    fn init(
        schema: &FactorizationSchema,
        config: &TqnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, VariantError> {
        let vocab = SeqVocab::for_schema(schema);
        let decode_cap = schema.query_count() + 2;
        let mut store = ParamStore::new("seq2seq");
        store.add(
            "token_embed",
            gaussian(rng, vec![vocab.size, config.model_dim], QUERY_EMBED_STD),
        );
        // Target tokens carry learnt positions; clip features stay unordered.
        store.add(
            "pos_embed",
            gaussian(rng, vec![decode_cap, config.model_dim], QUERY_EMBED_STD),
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
        let head = Linear::init(&mut store, "head", config.model_dim, vocab.size, rng);
        Ok(Self {
            store,
            layers,
            head,
            vocab,
            decode_cap,
            dropout_output: config.dropout_output,
        })
    }

    pub fn vocab(&self) -> SeqVocab {
        self.vocab
    }

    /// Token logits `[len x vocab]` for a prefix of input tokens under a
    /// causal self-attention mask.
    fn token_logits(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        phi: ValueId,
        input_tokens: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId, TensorError> {
        let len = input_tokens.len();
        if len == 0 || len > self.decode_cap {
            return Err(TensorError::InvalidArgument {
                op: "seq2seq",
                detail: format!("prefix length {len} outside 1..={}", self.decode_cap),
            });
        }
        let table = staged.id(self.store.param_id("token_embed").expect("registered"));
        let pos = staged.id(self.store.param_id("pos_embed").expect("registered"));
        let indices: Vec<usize> = input_tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(table, &indices)?;
        let pos = tape.slice_rows(pos, 0, len)?;
        let mut x = tape.add(tok, pos)?;
        let mask = causal_mask(len);
        for layer in &self.layers {
            let (out, _) = layer.forward(tape, staged, x, phi, Some(&mask), rng.as_deref_mut())?;
            x = out;
        }
        let x = maybe_dropout(tape, x, self.dropout_output, rng)?;
        self.head.apply(tape, staged, x)
    }

    /// Teacher-forced loss: the prefix `tokens[..L-1]` predicts `tokens[1..]`,
    /// summed cross-entropy over positions.
    fn loss(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        phi: ValueId,
        tokens: &[u32],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId, TensorError> {
        if tokens.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "seq2seq",
                detail: "target needs at least BOS and EOS".into(),
            });
        }
        let input = &tokens[..tokens.len() - 1];
        let logits = self.token_logits(tape, staged, phi, input, rng)?;
        let vocab = self.vocab.size;
        let mut terms = Vec::with_capacity(input.len());
        for (j, &target) in tokens[1..].iter().enumerate() {
            let row = tape.slice_rows(logits, j, 1)?;
            let row = tape.reshape(row, &[vocab])?;
            terms.push(tape.cross_entropy(row, target as usize)?);
        }
        tape.sum_scalars(&terms)
    }

    /// Greedy decode: emits tokens until EOS or the length cap, which is
    /// logged as a truncation warning.
    pub fn greedy_decode(&self, phi: &Tensor) -> Result<Vec<u32>, TensorError> {
        let mut tokens = vec![self.vocab.bos];
        let mut emitted = Vec::new();
        for _ in 0..self.decode_cap {
            let mut tape = Tape::new();
            let staged = self.store.stage(&mut tape);
            let phi_id = tape.leaf(phi);
            let logits = self.token_logits(&mut tape, &staged, phi_id, &tokens, None)?;
            let last = tape.value(logits);
            let row = last.row(last.shape()[0] - 1);
            let next = argmax(row) as u32;
            if next == self.vocab.eos {
                return Ok(emitted);
            }
            emitted.push(next);
            tokens.push(next);
        }
        log::debug!(
            "greedy decode hit the {}-token cap without EOS; truncating",
            self.decode_cap
        );
        Ok(emitted)
    }
}

enum Inner {
    Tqn(TqnModel),
    AvgPool(AvgPoolModel),
    SelfAttnCls(SelfAttnClsModel),
    MultiLabel(MultiLabelModel),
    Seq2Seq(Seq2SeqModel),
}

/// One of the five supervision strategies, behind the shared train/eval
/// interface the schedule drives.
pub struct VariantModel {
    kind: VariantKind,
    inner: Inner,
}

impl VariantModel {
    /// Builds a freshly initialised model. The configuration's head sizes
    /// must agree with the schema (checked here, before any training).
    pub fn init(
        kind: VariantKind,
        schema: &FactorizationSchema,
        config: &TqnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, VariantError> {
        config.validate()?;
        let mut expected = schema.arities();
        expected.push(schema.class_count());
        if config.head_sizes != expected {
            return Err(VariantError::Other(format!(
                "model head sizes {:?} do not match the schema's {:?}",
                config.head_sizes, expected
            )));
        }
        let inner = match kind {
            VariantKind::Tqn => Inner::Tqn(TqnModel::init(config.clone(), rng)?),
            VariantKind::AvgPool => Inner::AvgPool(AvgPoolModel::init(schema, config, rng)?),
            VariantKind::SelfAttnCls => {
                Inner::SelfAttnCls(SelfAttnClsModel::init(schema, config, rng)?)
            }
            VariantKind::MultiLabelBce => {
                Inner::MultiLabel(MultiLabelModel::init(schema, config, rng)?)
            }
            VariantKind::Seq2Seq => Inner::Seq2Seq(Seq2SeqModel::init(schema, config, rng)?),
        };
        Ok(Self { kind, inner })
    }

    pub fn kind(&self) -> VariantKind {
        self.kind
    }

    pub fn store(&self) -> &ParamStore {
        match &self.inner {
            Inner::Tqn(m) => m.store(),
            Inner::AvgPool(m) => &m.store,
            Inner::SelfAttnCls(m) => &m.store,
            Inner::MultiLabel(m) => &m.store,
            Inner::Seq2Seq(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match &mut self.inner {
            Inner::Tqn(m) => m.store_mut(),
            Inner::AvgPool(m) => &mut m.store,
            Inner::SelfAttnCls(m) => &mut m.store,
            Inner::MultiLabel(m) => &mut m.store,
            Inner::Seq2Seq(m) => &mut m.store,
        }
    }

    pub fn stage(&self, tape: &mut Tape) -> StagedParams {
        self.store().stage(tape)
    }

    /// The query decoder, when this variant is one (attention inspection).
    pub fn tqn(&self) -> Option<&TqnModel> {
        match &self.inner {
            Inner::Tqn(m) => Some(m),
            _ => None,
        }
    }

    pub fn seq2seq(&self) -> Option<&Seq2SeqModel> {
        match &self.inner {
            Inner::Seq2Seq(m) => Some(m),
            _ => None,
        }
    }

    /// Training loss for one sequence of clip features already on the tape.
    pub fn loss(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        phi: ValueId,
        target: &SequenceTarget,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ValueId, VariantError> {
        let loss = match &self.inner {
            Inner::Tqn(m) => m.loss(tape, staged, phi, &target.head_targets, rng)?,
            Inner::AvgPool(m) => {
                let logits = m.class_logits(tape, staged, phi, rng)?;
                let n = tape.value(logits).numel();
                let flat = tape.reshape(logits, &[n])?;
                tape.cross_entropy(flat, target.class_index)?
            }
            Inner::SelfAttnCls(m) => {
                let logits = m.class_logits(tape, staged, phi, rng)?;
                let n = tape.value(logits).numel();
                let flat = tape.reshape(logits, &[n])?;
                tape.cross_entropy(flat, target.class_index)?
            }
            Inner::MultiLabel(m) => {
                let logits = m.attribute_logits(tape, staged, phi, rng)?;
                tape.bce_with_logits(logits, &target.multilabel)?
            }
            Inner::Seq2Seq(m) => m.loss(tape, staged, phi, &target.tokens, rng)?,
        };
        Ok(loss)
    }

    /// Evaluation-mode category prediction from raw clip features.
    pub fn predict(
        &self,
        schema: &FactorizationSchema,
        phi: &Tensor,
    ) -> Result<usize, VariantError> {
        match &self.inner {
            Inner::Tqn(m) => Ok(m.predict_category(schema, phi)?),
            Inner::AvgPool(m) => {
                let mut tape = Tape::new();
                let staged = m.store.stage(&mut tape);
                let phi = tape.leaf(phi);
                let logits = m.class_logits(&mut tape, &staged, phi, None)?;
                Ok(argmax(tape.value(logits).data()))
            }
            Inner::SelfAttnCls(m) => {
                let mut tape = Tape::new();
                let staged = m.store.stage(&mut tape);
                let phi = tape.leaf(phi);
                let logits = m.class_logits(&mut tape, &staged, phi, None)?;
                Ok(argmax(tape.value(logits).data()))
            }
            Inner::MultiLabel(m) => {
                let mut tape = Tape::new();
                let staged = m.store.stage(&mut tape);
                let phi = tape.leaf(phi);
                let logits = m.attribute_logits(&mut tape, &staged, phi, None)?;
                let probs: Vec<f64> = tape
                    .value(logits)
                    .data()
                    .iter()
                    .map(|&z| 1.0 / (1.0 + (-z).exp()))
                    .collect();
                let per_query = m.split_probs(&probs);
                let class_scores = schema.class_prob_from_attributes(&per_query)?;
                Ok(argmax(&class_scores))
            }
            Inner::Seq2Seq(m) => {
                let decoded = m.greedy_decode(phi)?;
                Ok(schema.class_from_sequence(&decoded))
            }
        }
    }
}
