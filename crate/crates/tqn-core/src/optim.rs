//! Adam optimiser over one or more parameter stores.
//!
//! First and second moment estimates are keyed by qualified parameter name,
//! so optimiser state survives checkpointing and store reconstruction.
//! Parameters whose gradient buffer is absent are skipped entirely — neither
//! update nor weight decay touches them — which is how frozen sub-models stay
//! bit-identical through training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::TensorError;

/// Hyper-parameters of the optimiser and batch loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Learning rate for the clip encoder parameters.
    pub encoder_lr: f64,
    /// Learning rate for everything else (decoder, heads, embeddings).
    pub decoder_lr: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Sequences per optimisation step; the batch gradient is the mean.
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            encoder_lr: 1e-3,
            decoder_lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
        }
    }
}

/// Per-parameter first/second moment estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction and grad-side weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    config: OptimizerConfig,
    step_count: u64,
    state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step_count: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn state(&self) -> &BTreeMap<String, AdamState> {
        &self.state
    }

    /// Restores serialized optimiser progress.
    pub fn restore(&mut self, step_count: u64, state: BTreeMap<String, AdamState>) {
        self.step_count = step_count;
        self.state = state;
    }

    /// Applies one update to every parameter (with a gradient buffer) in the
    /// given stores, each store under its own learning rate.
    pub fn step(&mut self, groups: &mut [(&mut ParamStore, f64)]) -> Result<(), TensorError> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let OptimizerConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bias1 = 1.0 - beta1.powf(t);
        let bias2 = 1.0 - beta2.powf(t);
        for (store, lr) in groups.iter_mut() {
            let lr = *lr;
            for (name, tensor) in store.iter_mut() {
                let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                    continue;
                };
                let state = self.state.entry(name).or_insert_with(|| AdamState {
                    m: vec![0.0; grad.len()],
                    v: vec![0.0; grad.len()],
                });
                let data = tensor.data_mut();
                for i in 0..grad.len() {
                    let g = grad[i] + weight_decay * data[i];
                    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = state.m[i] / bias1;
                    let v_hat = state.v[i] / bias2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
                if !data.iter().all(|v| v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "adam_step" });
                }
            }
        }
        Ok(())
    }
}
