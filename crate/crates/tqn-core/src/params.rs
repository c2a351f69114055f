//! Named parameter storage shared by all models.
//!
//! A [`ParamStore`] owns a model's learnable tensors in a fixed insertion
//! order under stable dotted names (`decoder.layer0.self_attn.wq`). The order
//! gives deterministic staging onto tapes and deterministic optimiser
//! traversal; the names key optimiser state and checkpoint sections.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Tape, Tensor, TensorError, ValueId};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Insertion-ordered collection of named parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    namespace: String,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    /// A store whose parameters are reported as `namespace.name`.
    pub fn new(namespace: &str) -> Self {
        Self {
            namespace: namespace.to_string(),
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    /// Registers a tensor under a name unique within the store.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Looks a parameter up by its qualified or bare name.
    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        let bare = name
            .strip_prefix(&format!("{}.", self.namespace))
            .unwrap_or(name);
        self.index.get(bare).map(|&i| ParamId(i))
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Tensor> {
        self.param_id(name).map(|id| self.get(id))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Iterates `(qualified_name, tensor)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{}.{}", self.namespace, n), t))
    }

    /// Iterates `(qualified_name, tensor)` mutably in insertion order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor)> {
        self.names
            .iter()
            .zip(self.tensors.iter_mut())
            .map(|(n, t)| (format!("{}.{}", self.namespace, n), t))
    }

    /// Replaces the tensor stored under a qualified or bare name.
    pub fn set_by_name(&mut self, name: &str, tensor: Tensor) -> Result<(), TensorError> {
        let bare = name
            .strip_prefix(&format!("{}.", self.namespace))
            .unwrap_or(name);
        let &slot = self
            .index
            .get(bare)
            .ok_or_else(|| TensorError::InvalidArgument {
                op: "param_store_set",
                detail: format!("unknown parameter {name:?}"),
            })?;
        if self.tensors[slot].shape() != tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param_store_set",
                detail: format!(
                    "{name}: stored {:?} vs incoming {:?}",
                    self.tensors[slot].shape(),
                    tensor.shape()
                ),
            });
        }
        self.tensors[slot] = tensor;
        Ok(())
    }

    /// Leafs every parameter onto `tape` in insertion order; index the result
    /// by [`ParamId`].
    pub fn stage(&self, tape: &mut Tape) -> StagedParams {
        StagedParams {
            ids: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Adds `scale` times each staged leaf's tape gradient into the matching
    /// parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, staged: &StagedParams, scale: f64) {
        for (tensor, &id) in self.tensors.iter_mut().zip(&staged.ids) {
            tensor.accumulate_grad(tape.grad(id), scale);
        }
    }

    /// Zeroes (allocating if needed) every parameter's gradient buffer.
    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Drops every parameter's gradient buffer (parameters become frozen for
    /// optimisers, which skip tensors without gradients).
    pub fn detach_grads(&mut self) {
        for t in &mut self.tensors {
            t.detach_grad();
        }
    }
}

/// Tape leaf ids for one staging of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct StagedParams {
    ids: Vec<ValueId>,
}

impl StagedParams {
    pub fn id(&self, param: ParamId) -> ValueId {
        self.ids[param.0]
    }

    /// Builds a staging from explicit leaf ids, in the store's insertion
    /// order. Used by harnesses that leaf perturbed parameter copies.
    pub fn from_ids(ids: Vec<ValueId>) -> Self {
        Self { ids }
    }

    /// All staged leaf ids, in the store's insertion order.
    pub fn ids(&self) -> &[ValueId] {
        &self.ids
    }
}

/// Uniform Glorot initialisation over `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound)
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("finite init")
}

/// Zero-mean Gaussian initialisation used for embedding-like tables.
pub fn gaussian<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("finite init")
}
