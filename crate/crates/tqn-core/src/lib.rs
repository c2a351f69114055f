//! Temporal query networks for factorised sequence classification.
//!
//! A temporal query network reads a variable-length sequence of clip features
//! and answers a fixed set of learnt queries about it — one per semantic
//! attribute group plus one for the overall category. Training can either
//! backpropagate through the whole sequence or through a short online window
//! per iteration, with the remaining clips served from a stochastically
//! updated feature bank.
//!
//! The crate provides the differentiable tensor substrate, the query decoder
//! and reference baselines, the label-factorisation algebra, the feature
//! bank with its two-stage schedule, a planted-event synthetic benchmark,
//! and the run artefacts (containers, checkpoints, configs, manifests) used
//! by the experiment driver.

pub mod bank;
pub mod checkpoint;
pub mod container;
pub mod decoder;
pub mod encoder;
pub mod evaluate;
pub mod factorization;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rngs;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod variants;

pub use tensor::{Tape, Tensor, TensorError, ValueId};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
