//! The reverse-mode computation tape.
//!
//! A [`Tape`] is an append-only record of tensor operations. Each operation
//! validates its operands, computes its value eagerly, and stores the operand
//! ids needed to push gradients backwards. [`Tape::backward`] walks the record
//! in reverse creation order (a valid topological order, since operands always
//! precede results) and accumulates gradients additively into every node.

use rand::Rng;

use super::{sum_value_ordered, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    /// Input tensor; no operands.
    Leaf,
    /// `[r x k] . [k x c]` with index-ordered inner sums.
    MatMul,
    /// `[r x k] . [k x c]` with value-ordered inner sums, so the result is
    /// invariant to a shared permutation of the left columns / right rows.
    MatMulUnordered,
    /// Rank-2 transpose.
    Transpose,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Adds a rank-1 bias `[c]` to every row of `[r x c]`.
    AddBias,
    /// Multiplies every element by a constant.
    Scale(f64),
    /// Adds a constant tensor (no gradient flows into the constant).
    AddConst,
    /// Elementwise max(x, 0).
    Relu,
    /// Row softmax of a rank-2 tensor; normalisers accumulate value-ordered.
    Softmax,
    /// Per-row layer normalisation with learnt gain and bias.
    LayerNorm { eps: f64 },
    /// Column means of a rank-2 tensor, accumulated value-ordered: `[1 x c]`.
    MeanRows,
    /// Keeps `len` rows starting at `start`.
    SliceRows { start: usize, len: usize },
    /// Keeps `len` columns starting at `start`.
    SliceCols { start: usize, len: usize },
    /// Concatenates rank-2 tensors along columns.
    ConcatCols,
    /// Concatenates rank-2 tensors along rows.
    ConcatRows,
    /// Overlays the first operand (`[w x c]`) onto rows
    /// `[start, start + w)` of the second (`[t x c]`); gradients flow only
    /// into the overlay, never into the base rows.
    AssembleRows { start: usize },
    /// Reinterprets the buffer under a new shape with equal element count.
    Reshape,
    /// Selects rows of a table by index; repeated indices accumulate
    /// gradient additively.
    GatherRows(Vec<usize>),
    /// Elementwise multiply by stored keep/discard factors.
    Dropout { factors: Vec<f64> },
    /// Cross-entropy of one logit vector against a class index (scalar out).
    CrossEntropy { target: usize },
    /// Summed binary cross-entropy of logits against {0,1} targets.
    BceWithLogits { targets: Vec<f64> },
    /// Sum of scalar operands in index order.
    SumScalars,
    /// Sum as value-ordered accumulation, invariant to operand order.
    SumScalarsUnordered,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<ValueId>,
    value: Tensor,
    grad: Vec<f64>,
}

/// Append-only record of differentiable tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The computed value of a node.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// The gradient accumulated so far at a node.
    pub fn grad(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, value: Tensor) -> ValueId {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn rank2(&self, id: ValueId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let t = self.value(id);
        if t.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank 2, got shape {:?}", t.shape()),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn check_finite(data: &[f64], op: &'static str) -> Result<(), TensorError> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Records an input tensor. Gradients accumulate at leaves and are read
    /// back through [`Tape::grad`].
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        let mut v = t.clone();
        v.detach_grad();
        self.push(Op::Leaf, vec![], v)
    }

    /// Matrix product with index-ordered inner sums.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product whose inner sums accumulate in value order. Using this
    /// for self-attention gathers makes the output rows invariant, bit for
    /// bit, to any shared permutation of attention columns and value rows.
    pub fn matmul_unordered(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(
        &mut self,
        a: ValueId,
        b: ValueId,
        unordered: bool,
    ) -> Result<ValueId, TensorError> {
        let op = if unordered { "matmul_unordered" } else { "matmul" };
        let (ar, ak) = self.rank2(a, op)?;
        let (bk, bc) = self.rank2(b, op)?;
        if ak != bk {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("inner dims {ak} vs {bk}"),
            });
        }
        if ak == 0 {
            return Err(TensorError::EmptyAxis { op });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; ar * bc];
        if unordered {
            let mut scratch = vec![0.0; ak];
            for i in 0..ar {
                for j in 0..bc {
                    for k in 0..ak {
                        scratch[k] = av[i * ak + k] * bv[k * bc + j];
                    }
                    out[i * bc + j] = sum_value_ordered(&mut scratch);
                }
            }
        } else {
            for i in 0..ar {
                for k in 0..ak {
                    let aik = av[i * ak + k];
                    let brow = &bv[k * bc..(k + 1) * bc];
                    let orow = &mut out[i * bc..(i + 1) * bc];
                    for (o, bkj) in orow.iter_mut().zip(brow) {
                        *o += aik * bkj;
                    }
                }
            }
        }
        Self::check_finite(&out, op)?;
        let value = Tensor::new(vec![ar, bc], out)?;
        let kind = if unordered {
            Op::MatMulUnordered
        } else {
            Op::MatMul
        };
        Ok(self.push(kind, vec![a, b], value))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let (r, c) = self.rank2(x, "transpose")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(Op::Transpose, vec![x], value))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Self::check_finite(&out, "add")?;
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId, TensorError> {
        let (r, c) = self.rank2(x, "add_bias")?;
        let bt = self.value(bias);
        if bt.rank() != 1 || bt.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias shape {:?} for {c} columns", bt.shape()),
            });
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] + bv[j];
            }
        }
        Self::check_finite(&out, "add_bias")?;
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::AddBias, vec![x, bias], value))
    }

    /// Multiplies every element by a finite constant.
    pub fn scale(&mut self, x: ValueId, s: f64) -> Result<ValueId, TensorError> {
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * s).collect();
        Self::check_finite(&out, "scale")?;
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(Op::Scale(s), vec![x], value))
    }

    /// Adds a constant tensor elementwise. The constant receives no gradient,
    /// and (unlike other ops) non-finite sums are allowed so that additive
    /// attention masks can drive scores towards negative infinity.
    pub fn add_const(&mut self, x: ValueId, c: &Tensor) -> Result<ValueId, TensorError> {
        if self.value(x).shape() != c.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add_const",
                detail: format!("{:?} vs {:?}", self.value(x).shape(), c.shape()),
            });
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        Self::check_finite(&out, "add_const")?;
        let value = Tensor::new(c.shape().to_vec(), out)?;
        Ok(self.push(Op::AddConst, vec![x], value))
    }

    /// Elementwise rectifier.
    pub fn relu(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(Op::Relu, vec![x], value))
    }

    /// Softmax over the rows of a rank-2 tensor. Each row is shifted by its
    /// maximum before exponentiation, and the normaliser accumulates in value
    /// order so that permuting a row's entries permutes the output exactly.
    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let (r, c) = self.rank2(x, "softmax_rows")?;
        if c == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax_rows" });
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut exps = vec![0.0; c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if !m.is_finite() {
                // A fully masked row would normalise over nothing.
                return Err(TensorError::EmptyAxis { op: "softmax_rows" });
            }
            for (e, v) in exps.iter_mut().zip(row) {
                *e = (v - m).exp();
            }
            let orow = &mut out[i * c..(i + 1) * c];
            orow.copy_from_slice(&exps);
            let denom = sum_value_ordered(&mut exps);
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
        Self::check_finite(&out, "softmax_rows")?;
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::Softmax, vec![x], value))
    }

    /// Per-row layer normalisation of `[r x c]` with rank-1 gain and bias.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    ) -> Result<ValueId, TensorError> {
        let (r, c) = self.rank2(x, "layer_norm")?;
        if c == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                detail: format!("eps must be positive and finite, got {eps}"),
            });
        }
        for (id, name) in [(gain, "gain"), (bias, "bias")] {
            let t = self.value(id);
            if t.rank() != 1 || t.numel() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("{name} shape {:?} for {c} columns", t.shape()),
                });
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        Self::check_finite(&out, "layer_norm")?;
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gain, bias], value))
    }

    /// Column means of a rank-2 tensor, `[r x c] -> [1 x c]`, with
    /// value-ordered accumulation so row order cannot affect the result.
    pub fn mean_rows(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let (r, c) = self.rank2(x, "mean_rows")?;
        if r == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_rows" });
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; c];
        let mut column = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                column[i] = xv[i * c + j];
            }
            out[j] = sum_value_ordered(&mut column) / r as f64;
        }
        Self::check_finite(&out, "mean_rows")?;
        let value = Tensor::new(vec![1, c], out)?;
        Ok(self.push(Op::MeanRows, vec![x], value))
    }

    /// Keeps `len` rows starting at `start`.
    pub fn slice_rows(
        &mut self,
        x: ValueId,
        start: usize,
        len: usize,
    ) -> Result<ValueId, TensorError> {
        let (r, c) = self.rank2(x, "slice_rows")?;
        if start + len > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                limit: r,
            });
        }
        let xv = self.value(x).data();
        let value = Tensor::new(vec![len, c], xv[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(Op::SliceRows { start, len }, vec![x], value))
    }

    /// Keeps `len` columns starting at `start`.
    pub fn slice_cols(
        &mut self,
        x: ValueId,
        start: usize,
        len: usize,
    ) -> Result<ValueId, TensorError> {
        let (r, c) = self.rank2(x, "slice_cols")?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                limit: c,
            });
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        Ok(self.push(Op::SliceCols { start, len }, vec![x], value))
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_cols" });
        }
        let (r, _) = self.rank2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.rank2(p, "concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {r} vs {pr}"),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![r, total], out)?;
        Ok(self.push(Op::ConcatCols, parts.to_vec(), value))
    }

    /// Concatenates rank-2 tensors along rows.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_rows" });
        }
        let (_, c) = self.rank2(parts[0], "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.rank2(p, "concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts {c} vs {pc}"),
                });
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::ConcatRows, parts.to_vec(), value))
    }

    /// Overlays `online` (`[w x c]`) onto rows `[start, start + w)` of `base`
    /// (`[t x c]`). The untouched base rows behave as constants: no gradient
    /// ever flows into `base`, which is exactly the contract needed when most
    /// rows come from a cached feature bank.
    pub fn assemble_rows(
        &mut self,
        online: ValueId,
        base: ValueId,
        start: usize,
    ) -> Result<ValueId, TensorError> {
        let (w, c) = self.rank2(online, "assemble_rows")?;
        let (t, bc) = self.rank2(base, "assemble_rows")?;
        if c != bc {
            return Err(TensorError::ShapeMismatch {
                op: "assemble_rows",
                detail: format!("column counts {c} vs {bc}"),
            });
        }
        if start + w > t {
            return Err(TensorError::IndexOutOfRange {
                op: "assemble_rows",
                index: start + w,
                limit: t,
            });
        }
        let mut out = self.value(base).data().to_vec();
        out[start * c..(start + w) * c].copy_from_slice(self.value(online).data());
        let value = Tensor::new(vec![t, c], out)?;
        Ok(self.push(Op::AssembleRows { start }, vec![online, base], value))
    }

    /// Reinterprets the value under a new shape with the same element count.
    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "cannot view {:?} as {shape:?}",
                    self.value(x).shape()
                ),
            });
        }
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Selects rows of a rank-2 table by index. Repeated indices are allowed;
    /// their gradient contributions accumulate.
    pub fn gather_rows(&mut self, table: ValueId, indices: &[usize]) -> Result<ValueId, TensorError> {
        let (v, c) = self.rank2(table, "gather_rows")?;
        for &idx in indices {
            if idx >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: idx,
                    limit: v,
                });
            }
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &idx in indices {
            out.extend_from_slice(&tv[idx * c..(idx + 1) * c]);
        }
        let value = Tensor::new(vec![indices.len(), c], out)?;
        Ok(self.push(Op::GatherRows(indices.to_vec()), vec![table], value))
    }

    /// Inverted dropout: each element is zeroed with probability `rate`,
    /// surviving elements are scaled by `1 / (1 - rate)`. Draws one uniform
    /// variate per element from `rng`. Callers skip this op in eval mode.
    pub fn dropout<R: Rng>(
        &mut self,
        x: ValueId,
        rate: f64,
        rng: &mut R,
    ) -> Result<ValueId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("rate must lie in [0, 1), got {rate}"),
            });
        }
        let keep = 1.0 / (1.0 - rate);
        let factors: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(v, f)| v * f)
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(Op::Dropout { factors }, vec![x], value))
    }

    /// Cross-entropy `logsumexp(logits) - logits[target]` of a single logit
    /// vector (any shape, flattened) against a class index. Scalar output.
    pub fn cross_entropy(&mut self, logits: ValueId, target: usize) -> Result<ValueId, TensorError> {
        let n = self.value(logits).numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "cross_entropy" });
        }
        if target >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                limit: n,
            });
        }
        let xv = self.value(logits).data();
        let m = xv.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + xv.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - xv[target];
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let value = Tensor::scalar(loss)?;
        Ok(self.push(Op::CrossEntropy { target }, vec![logits], value))
    }

    /// Summed binary cross-entropy with logits: for each unit,
    /// `softplus(x) - t * x`, computed in the numerically stable form.
    pub fn bce_with_logits(
        &mut self,
        logits: ValueId,
        targets: &[f64],
    ) -> Result<ValueId, TensorError> {
        let n = self.value(logits).numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "bce_with_logits" });
        }
        if n != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("{n} logits vs {} targets", targets.len()),
            });
        }
        if targets.iter().any(|t| *t != 0.0 && *t != 1.0) {
            return Err(TensorError::InvalidArgument {
                op: "bce_with_logits",
                detail: "targets must be 0 or 1".into(),
            });
        }
        let xv = self.value(logits).data();
        let loss: f64 = xv
            .iter()
            .zip(targets)
            .map(|(x, t)| x.max(0.0) + (-x.abs()).exp().ln_1p() - t * x)
            .sum();
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "bce_with_logits" });
        }
        let value = Tensor::scalar(loss)?;
        Ok(self.push(
            Op::BceWithLogits {
                targets: targets.to_vec(),
            },
            vec![logits],
            value,
        ))
    }

    /// Sum of scalar nodes in operand order.
    pub fn sum_scalars(&mut self, xs: &[ValueId]) -> Result<ValueId, TensorError> {
        self.sum_scalars_impl(xs, false)
    }

    /// Sum of scalar nodes with value-ordered accumulation, so any reordering
    /// of the operands produces a bit-identical total.
    pub fn sum_scalars_unordered(&mut self, xs: &[ValueId]) -> Result<ValueId, TensorError> {
        self.sum_scalars_impl(xs, true)
    }

    fn sum_scalars_impl(&mut self, xs: &[ValueId], unordered: bool) -> Result<ValueId, TensorError> {
        let op = if unordered {
            "sum_scalars_unordered"
        } else {
            "sum_scalars"
        };
        if xs.is_empty() {
            return Err(TensorError::EmptyAxis { op });
        }
        let mut terms = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.numel() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op,
                    detail: format!("operand shape {:?} is not scalar", t.shape()),
                });
            }
            terms.push(t.item());
        }
        let total = if unordered {
            sum_value_ordered(&mut terms)
        } else {
            terms.iter().sum()
        };
        if !total.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let value = Tensor::scalar(total)?;
        let kind = if unordered {
            Op::SumScalarsUnordered
        } else {
            Op::SumScalars
        };
        Ok(self.push(kind, xs.to_vec(), value))
    }

    /// Runs one reverse pass from a scalar root, adding this pass's gradient
    /// into every node's accumulated gradient. Calling this twice from the
    /// same root therefore doubles every gradient.
    pub fn backward(&mut self, root: ValueId) -> Result<(), TensorError> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                detail: format!("root shape {:?} is not scalar", self.value(root).shape()),
            });
        }
        let n = root.0 + 1;
        let mut pass: Vec<Vec<f64>> = self.nodes[..n]
            .iter()
            .map(|node| vec![0.0; node.value.numel()])
            .collect();
        pass[root.0][0] = 1.0;
        for i in (0..n).rev() {
            if pass[i].iter().all(|v| *v == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut pass[i]);
            self.backprop_node(i, &g, &mut pass);
            pass[i] = g;
        }
        for (node, g) in self.nodes[..n].iter_mut().zip(&pass) {
            for (dst, src) in node.grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
        Ok(())
    }

    /// Pushes the gradient `g` (d loss / d node `i`) into the pass gradients
    /// of node `i`'s operands.
    fn backprop_node(&self, i: usize, g: &[f64], pass: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul | Op::MatMulUnordered => {
                let a = self.nodes[ins[0].0].value.data();
                let b = self.nodes[ins[1].0].value.data();
                let (r, k) = {
                    let s = self.nodes[ins[0].0].value.shape();
                    (s[0], s[1])
                };
                let c = self.nodes[ins[1].0].value.shape()[1];
                {
                    // dA += G . B^T
                    let da = &mut pass[ins[0].0];
                    for ii in 0..r {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for jj in 0..c {
                                acc += g[ii * c + jj] * b[kk * c + jj];
                            }
                            da[ii * k + kk] += acc;
                        }
                    }
                }
                {
                    // dB += A^T . G
                    let db = &mut pass[ins[1].0];
                    for kk in 0..k {
                        for jj in 0..c {
                            let mut acc = 0.0;
                            for ii in 0..r {
                                acc += a[ii * k + kk] * g[ii * c + jj];
                            }
                            db[kk * c + jj] += acc;
                        }
                    }
                }
            }
            Op::Transpose => {
                let (c, r) = {
                    let s = &node.value.shape();
                    (s[0], s[1])
                };
                let dx = &mut pass[ins[0].0];
                for i2 in 0..c {
                    for j2 in 0..r {
                        dx[j2 * c + i2] += g[i2 * r + j2];
                    }
                }
            }
            Op::Add => {
                for &input in ins {
                    for (dst, src) in pass[input.0].iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
            Op::AddBias => {
                let c = self.nodes[ins[1].0].value.numel();
                let r = node.value.numel() / c;
                for (dst, src) in pass[ins[0].0].iter_mut().zip(g) {
                    *dst += src;
                }
                let db = &mut pass[ins[1].0];
                for i2 in 0..r {
                    for j2 in 0..c {
                        db[j2] += g[i2 * c + j2];
                    }
                }
            }
            Op::Scale(s) => {
                for (dst, src) in pass[ins[0].0].iter_mut().zip(g) {
                    *dst += s * src;
                }
            }
            Op::AddConst => {
                for (dst, src) in pass[ins[0].0].iter_mut().zip(g) {
                    *dst += src;
                }
            }
            Op::Relu => {
                let x = self.nodes[ins[0].0].value.data();
                for ((dst, src), xv) in pass[ins[0].0].iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *dst += src;
                    }
                }
            }
            Op::Softmax => {
                let y = node.value.data();
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let dx = &mut pass[ins[0].0];
                for i2 in 0..r {
                    let yr = &y[i2 * c..(i2 + 1) * c];
                    let gr = &g[i2 * c..(i2 + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j2 in 0..c {
                        dx[i2 * c + j2] += yr[j2] * (gr[j2] - dot);
                    }
                }
            }
            Op::LayerNorm { eps } => {
                let x = self.nodes[ins[0].0].value.data();
                let gain = self.nodes[ins[1].0].value.data();
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let cf = c as f64;
                for i2 in 0..r {
                    let row = &x[i2 * c..(i2 + 1) * c];
                    let gr = &g[i2 * c..(i2 + 1) * c];
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dgain and dbias first; then route through x-hat.
                    let mut mean_h = 0.0;
                    let mut mean_hx = 0.0;
                    for j2 in 0..c {
                        let xhat = (row[j2] - mean) * inv;
                        pass[ins[1].0][j2] += gr[j2] * xhat;
                        pass[ins[2].0][j2] += gr[j2];
                        let h = gr[j2] * gain[j2];
                        mean_h += h;
                        mean_hx += h * xhat;
                    }
                    mean_h /= cf;
                    mean_hx /= cf;
                    let dx = &mut pass[ins[0].0];
                    for j2 in 0..c {
                        let xhat = (row[j2] - mean) * inv;
                        let h = gr[j2] * gain[j2];
                        dx[i2 * c + j2] += inv * (h - mean_h - xhat * mean_hx);
                    }
                }
            }
            Op::MeanRows => {
                let c = node.value.numel();
                let r = self.nodes[ins[0].0].value.shape()[0];
                let dx = &mut pass[ins[0].0];
                let rf = r as f64;
                for i2 in 0..r {
                    for j2 in 0..c {
                        dx[i2 * c + j2] += g[j2] / rf;
                    }
                }
            }
            Op::SliceRows { start, len } => {
                let c = node.value.shape()[1];
                let dx = &mut pass[ins[0].0];
                dx[start * c..(start + len) * c]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(dst, src)| *dst += src);
            }
            Op::SliceCols { start, len } => {
                let r = node.value.shape()[0];
                let c = self.nodes[ins[0].0].value.shape()[1];
                let dx = &mut pass[ins[0].0];
                for i2 in 0..r {
                    for j2 in 0..*len {
                        dx[i2 * c + start + j2] += g[i2 * len + j2];
                    }
                }
            }
            Op::ConcatCols => {
                let total = node.value.shape()[1];
                let r = node.value.shape()[0];
                let mut offset = 0;
                for &input in ins {
                    let w = self.nodes[input.0].value.shape()[1];
                    let dx = &mut pass[input.0];
                    for i2 in 0..r {
                        for j2 in 0..w {
                            dx[i2 * w + j2] += g[i2 * total + offset + j2];
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for &input in ins {
                    let n2 = self.nodes[input.0].value.numel();
                    pass[input.0]
                        .iter_mut()
                        .zip(&g[offset..offset + n2])
                        .for_each(|(dst, src)| *dst += src);
                    offset += n2;
                }
            }
            Op::AssembleRows { start } => {
                // Gradient reaches only the overlaid online rows; the base
                // rows are constants by contract.
                let c = node.value.shape()[1];
                let w = self.nodes[ins[0].0].value.shape()[0];
                pass[ins[0].0]
                    .iter_mut()
                    .zip(&g[start * c..(start + w) * c])
                    .for_each(|(dst, src)| *dst += src);
            }
            Op::Reshape => {
                pass[ins[0].0]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(dst, src)| *dst += src);
            }
            Op::GatherRows(indices) => {
                let c = node.value.shape()[1];
                let dt = &mut pass[ins[0].0];
                for (l, &idx) in indices.iter().enumerate() {
                    for j2 in 0..c {
                        dt[idx * c + j2] += g[l * c + j2];
                    }
                }
            }
            Op::Dropout { factors } => {
                pass[ins[0].0]
                    .iter_mut()
                    .zip(g)
                    .zip(factors)
                    .for_each(|((dst, src), f)| *dst += src * f);
            }
            Op::CrossEntropy { target } => {
                let x = self.nodes[ins[0].0].value.data();
                let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let denom: f64 = x.iter().map(|v| (v - m).exp()).sum();
                let dx = &mut pass[ins[0].0];
                for (j2, xv) in x.iter().enumerate() {
                    let p = (xv - m).exp() / denom;
                    let indicator = if j2 == *target { 1.0 } else { 0.0 };
                    dx[j2] += g[0] * (p - indicator);
                }
            }
            Op::BceWithLogits { targets } => {
                let x = self.nodes[ins[0].0].value.data();
                let dx = &mut pass[ins[0].0];
                for (j2, (xv, t)) in x.iter().zip(targets).enumerate() {
                    let sigma = 1.0 / (1.0 + (-xv).exp());
                    dx[j2] += g[0] * (sigma - t);
                }
            }
            Op::SumScalars | Op::SumScalarsUnordered => {
                for &input in ins {
                    pass[input.0][0] += g[0];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Independent triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (r, k, c) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.at(i, kk) * b.at(kk, j);
                }
                out[i * c + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = t2(&[
            vec![0.5, -1.25, 2.0],
            vec![3.0, 0.125, -0.75],
            vec![-2.5, 1.5, 0.0625],
        ]);
        let b = t2(&[
            vec![1.0, -0.5, 0.25],
            vec![0.75, 2.0, -1.0],
            vec![-0.125, 0.5, 4.0],
        ]);
        let expected = matmul_oracle(&a, &b);
        let mut tape = Tape::new();
        let (ia, ib) = (tape.leaf(&a), tape.leaf(&b));
        let out = tape.matmul(ia, ib).unwrap();
        for (got, want) in tape.value(out).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let un = tape.matmul_unordered(ia, ib).unwrap();
        for (got, want) in tape.value(un).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = t2(&[vec![1.0, 2.0]]);
        let b = t2(&[vec![1.0], vec![2.0], vec![3.0]]);
        let mut tape = Tape::new();
        let (ia, ib) = (tape.leaf(&a), tape.leaf(&b));
        assert!(matches!(
            tape.matmul(ia, ib),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_matches_exp_normalise_oracle() {
        // Oracle: direct exp / sum at f64, no max shift (values are small).
        let x = t2(&[vec![1.0, 2.0, 3.0], vec![-0.5, 0.0, 0.5]]);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let y = tape.softmax_rows(ix).unwrap();
        for i in 0..2 {
            let row = x.row(i);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for (j, v) in row.iter().enumerate() {
                let want = v.exp() / denom;
                let got = tape.value(y).at(i, j);
                assert!((got - want).abs() < 1e-14, "{got} vs {want}");
            }
            let sum: f64 = tape.value(y).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = t2(&[vec![5.0, 7.0, 5.5]]);
        let shifted = t2(&[vec![505.0, 507.0, 505.5]]);
        let mut tape = Tape::new();
        let (ix, is) = (tape.leaf(&x), tape.leaf(&shifted));
        let (yx, ys) = (
            tape.softmax_rows(ix).unwrap(),
            tape.softmax_rows(is).unwrap(),
        );
        for (a, b) in tape
            .value(yx)
            .data()
            .iter()
            .zip(tape.value(ys).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_row_permutation_is_bit_exact() {
        let x = t2(&[vec![0.3, -1.7, 2.2, 0.3, 9.0]]);
        let perm = [4usize, 0, 3, 1, 2];
        let px = t2(&[perm.iter().map(|&j| x.at(0, j)).collect::<Vec<_>>()]);
        let mut tape = Tape::new();
        let (ix, ip) = (tape.leaf(&x), tape.leaf(&px));
        let (yx, yp) = (
            tape.softmax_rows(ix).unwrap(),
            tape.softmax_rows(ip).unwrap(),
        );
        for (slot, &j) in perm.iter().enumerate() {
            assert_eq!(
                tape.value(yp).at(0, slot).to_bits(),
                tape.value(yx).at(0, j).to_bits()
            );
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_n() {
        for n in [2usize, 3, 7] {
            let logits = Tensor::new(vec![n], vec![0.8; n]).unwrap();
            let mut tape = Tape::new();
            let il = tape.leaf(&logits);
            let loss = tape.cross_entropy(il, n - 1).unwrap();
            assert!((tape.value(loss).item() - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        // Oracle: softmax(logits) - onehot(target), computed independently.
        let logits = Tensor::new(vec![4], vec![0.1, -0.4, 1.3, 0.9]).unwrap();
        let target = 2;
        let denom: f64 = logits.data().iter().map(|v| v.exp()).sum();
        let mut tape = Tape::new();
        let il = tape.leaf(&logits);
        let loss = tape.cross_entropy(il, target).unwrap();
        tape.backward(loss).unwrap();
        for (j, v) in logits.data().iter().enumerate() {
            let p = v.exp() / denom;
            let want = p - if j == target { 1.0 } else { 0.0 };
            assert!((tape.grad(il)[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_doubles_leaf_gradients() {
        let x = t2(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let w = t2(&[vec![0.2], vec![-0.7]]);
        let mut tape = Tape::new();
        let (ix, iw) = (tape.leaf(&x), tape.leaf(&w));
        let y = tape.matmul(ix, iw).unwrap();
        let flat = tape.reshape(y, &[2]).unwrap();
        let loss = tape.cross_entropy(flat, 0).unwrap();
        tape.backward(loss).unwrap();
        let once: Vec<f64> = tape.grad(iw).to_vec();
        tape.backward(loss).unwrap();
        for (twice, one) in tape.grad(iw).iter().zip(&once) {
            assert_eq!(twice.to_bits(), (2.0 * one).to_bits());
        }
    }

    #[test]
    fn mean_rows_is_row_permutation_bit_exact() {
        let x = t2(&[
            vec![0.1, 1e15, -3.0],
            vec![7.25, -1e15, 0.5],
            vec![-0.875, 3.5, 2.0],
        ]);
        let perm = [2usize, 0, 1];
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let mut tape = Tape::new();
        let (ix, ip) = (tape.leaf(&x), tape.leaf(&px));
        let (mx, mp) = (tape.mean_rows(ix).unwrap(), tape.mean_rows(ip).unwrap());
        assert!(tape.value(mx).bit_eq(tape.value(mp)));
    }

    #[test]
    fn assemble_rows_blocks_gradient_to_base() {
        let online = t2(&[vec![1.0, 2.0]]);
        let base = t2(&[vec![9.0, 9.0], vec![8.0, 8.0], vec![7.0, 7.0]]);
        let mut tape = Tape::new();
        let (io, ib) = (tape.leaf(&online), tape.leaf(&base));
        let merged = tape.assemble_rows(io, ib, 1).unwrap();
        assert_eq!(tape.value(merged).row(1), online.row(0));
        assert_eq!(tape.value(merged).row(0), base.row(0));
        let pooled = tape.mean_rows(merged).unwrap();
        let flat = tape.reshape(pooled, &[2]).unwrap();
        let loss = tape.cross_entropy(flat, 0).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(ib).iter().all(|g| *g == 0.0));
        assert!(tape.grad(io).iter().any(|g| *g != 0.0));
    }

    #[test]
    fn empty_axis_is_rejected() {
        let empty = Tensor::zeros(vec![0, 3]);
        let mut tape = Tape::new();
        let ie = tape.leaf(&empty);
        assert!(matches!(
            tape.mean_rows(ie),
            Err(TensorError::EmptyAxis { .. })
        ));
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let table = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut tape = Tape::new();
        let it = tape.leaf(&table);
        let picked = tape.gather_rows(it, &[0, 0, 1]).unwrap();
        let pooled = tape.mean_rows(picked).unwrap();
        let flat = tape.reshape(pooled, &[2]).unwrap();
        let loss = tape.cross_entropy(flat, 1).unwrap();
        tape.backward(loss).unwrap();
        // Row 0 was picked twice, so its gradient is twice row 1's pattern.
        let g = tape.grad(it);
        assert!((g[0] - 2.0 * g[2]).abs() < 1e-12);
        assert!((g[1] - 2.0 * g[3]).abs() < 1e-12);
    }
}
