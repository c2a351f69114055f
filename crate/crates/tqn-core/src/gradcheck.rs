//! End-to-end gradient verification of the training pipeline.
//!
//! Draws a downsized architecture from the seed (one or two decoder layers,
//! one or two heads, model width at most 8, at most six clips) together with
//! a random sequence and class, then compares backpropagated gradients of
//! the full training loss — through the variant model *and* the clip
//! encoder — against central finite differences on every parameter
//! component. Dropout is disabled so the loss is a deterministic function of
//! the parameters.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::decoder::TqnConfig;
use crate::encoder::ToyEncoder;
use crate::factorization::FactorizationSchema;
use crate::params::StagedParams;
use crate::rngs::{stream_rng, STREAM_ENCODER_INIT, STREAM_MODEL_INIT};
use crate::tensor::grad_check::finite_diff_grad_check;
use crate::tensor::{Tape, Tensor, TensorError, ValueId};
use crate::variants::{SequenceTarget, VariantError, VariantKind, VariantModel};

/// Result of one seed × variant pipeline check.
#[derive(Debug, Clone)]
pub struct PipelineCheck {
    pub kind: VariantKind,
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub clip_count: usize,
    pub class_index: usize,
    pub max_rel_error: f64,
}

const CLIP_LEN: usize = 2;
const INPUT_DIM: usize = 4;
const HIDDEN_DIM: usize = 6;

/// RNG stream for the check's random architecture, sequence, and class.
const STREAM_CHECK_DATA: u64 = 5;

/// Checks backprop of one variant's full training loss (encoder included)
/// against central finite differences on every parameter component.
pub fn check_training_gradients(
    schema: &FactorizationSchema,
    kind: VariantKind,
    seed: u64,
) -> Result<PipelineCheck, VariantError> {
    let mut data_rng = stream_rng(seed, STREAM_CHECK_DATA);
    let layers = data_rng.gen_range(1..=2usize);
    let heads = data_rng.gen_range(1..=2usize);
    let model_dim = 2 * heads * data_rng.gen_range(1..=2usize);
    let ff_dim = data_rng.gen_range(6..=12usize);
    let config = TqnConfig::for_schema(schema, model_dim, model_dim, layers, heads, ff_dim, 0.0, 0.0);
    let encoder = ToyEncoder::init(
        CLIP_LEN,
        INPUT_DIM,
        HIDDEN_DIM,
        model_dim,
        &mut stream_rng(seed, STREAM_ENCODER_INIT),
    )?;
    let model = VariantModel::init(kind, schema, &config, &mut stream_rng(seed, STREAM_MODEL_INIT))?;

    let clip_count = data_rng.gen_range(2..=6usize);
    let frame_count = clip_count * CLIP_LEN;
    let frames = Tensor::new(
        vec![frame_count, INPUT_DIM],
        (0..frame_count * INPUT_DIM)
            .map(|_| data_rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )?;
    let class_index = data_rng.gen_range(0..schema.class_count());
    let target = SequenceTarget::for_class(schema, class_index)?;

    let n_enc = encoder.store().len();
    let mut params: Vec<Tensor> = encoder.store().iter().map(|(_, t)| t.clone()).collect();
    params.extend(model.store().iter().map(|(_, t)| t.clone()));

    let (encoder_ref, model_ref, frames_ref, target_ref) = (&encoder, &model, &frames, &target);
    let max_rel_error = finite_diff_grad_check(
        |tape: &mut Tape, ids: &[ValueId]| {
            let enc_staged = StagedParams::from_ids(ids[..n_enc].to_vec());
            let model_staged = StagedParams::from_ids(ids[n_enc..].to_vec());
            let frames_id = tape.leaf(frames_ref);
            let phi = encoder_ref.encode(tape, &enc_staged, frames_id)?;
            model_ref
                .loss(tape, &model_staged, phi, target_ref, None)
                .map_err(|e| match e {
                    VariantError::Tensor(t) => t,
                    other => TensorError::InvalidArgument {
                        op: "pipeline_loss",
                        detail: other.to_string(),
                    },
                })
        },
        &params,
        1e-5,
    )?;
    Ok(PipelineCheck {
        kind,
        seed,
        layers,
        heads,
        model_dim,
        clip_count,
        class_index,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::bundled;

    #[test]
    fn one_pipeline_check_per_variant_family_passes() {
        let schema = bundled::synthetic().unwrap();
        for kind in [VariantKind::Tqn, VariantKind::AvgPool] {
            let check = check_training_gradients(&schema, kind, 3).unwrap();
            assert!(
                check.max_rel_error < 1e-4,
                "{kind}: max relative error {}",
                check.max_rel_error
            );
            assert!(check.clip_count <= 6);
        }
    }
}
