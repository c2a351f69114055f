//! Checkpointing: enough state to continue a training run bit for bit.
//!
//! A checkpoint captures the encoder and model parameters, the optimiser
//! moments, the feature bank (features and refresh stamps), the training RNG
//! cursor, the epoch log, and the experiment configuration text. Restoring
//! into a freshly constructed trainer of the same configuration and resuming
//! retraces a never-interrupted run exactly, so checkpoint files of the two
//! runs are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{BankEntry, FeatureBank};
use crate::container::{Container, ContainerError};
use crate::optim::AdamState;
use crate::rngs::RngState;
use crate::schedule::{
    epoch_metrics_from_csv, epoch_metrics_to_csv, EpochMetrics, TrainError, Trainer,
};
use crate::tensor::{Tensor, TensorError};
use crate::variants::VariantKind;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Invalid(String),
}

/// JSON header section describing everything else in the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    format: u32,
    variant: String,
    epochs_done: usize,
    iteration: u64,
    adam_step: u64,
    train_rng: RngState,
    encoder_params: Vec<String>,
    model_params: Vec<String>,
    adam_params: Vec<String>,
    bank: Option<BankMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankMeta {
    feature_dim: usize,
    ids: Vec<u32>,
    stamps: Vec<Vec<u64>>,
}

fn rank1(data: Vec<f64>) -> Result<Tensor, TensorError> {
    let n = data.len();
    Tensor::new(vec![n], data)
}

/// Serialises a trainer's full state (plus the configuration text that built
/// it and the epoch log so far) into a container.
pub fn checkpoint_to_container(
    trainer: &Trainer<'_>,
    config_toml: &str,
    metrics: &[EpochMetrics],
) -> Result<Container, CheckpointError> {
    let mut c = Container::new();
    let encoder_params: Vec<String> = trainer.encoder.store().iter().map(|(n, _)| n).collect();
    let model_params: Vec<String> = trainer.model.store().iter().map(|(n, _)| n).collect();
    let adam_params: Vec<String> = trainer.optimizer.state().keys().cloned().collect();
    let bank_meta = trainer.bank.as_ref().map(|bank| BankMeta {
        feature_dim: bank.feature_dim(),
        ids: bank.iter().map(|(id, _)| id).collect(),
        stamps: bank.iter().map(|(_, e)| e.stamps.clone()).collect(),
    });
    let meta = Meta {
        format: CHECKPOINT_FORMAT,
        variant: trainer.model.kind().as_str().to_string(),
        epochs_done: metrics.len(),
        iteration: trainer.iteration,
        adam_step: trainer.optimizer.step_count(),
        train_rng: RngState::capture(&trainer.train_rng),
        encoder_params,
        model_params,
        adam_params,
        bank: bank_meta,
    };
    c.put_text("meta", serde_json::to_string_pretty(&meta)?)?;
    c.put_text("config", config_toml)?;
    c.put_text("metrics", epoch_metrics_to_csv(metrics))?;
    for (name, tensor) in trainer.encoder.store().iter() {
        c.put_tensor(&format!("param.{name}"), tensor.clone())?;
    }
    for (name, tensor) in trainer.model.store().iter() {
        c.put_tensor(&format!("param.{name}"), tensor.clone())?;
    }
    for (name, state) in trainer.optimizer.state() {
        c.put_tensor(&format!("adam.m.{name}"), rank1(state.m.clone())?)?;
        c.put_tensor(&format!("adam.v.{name}"), rank1(state.v.clone())?)?;
    }
    if let Some(bank) = &trainer.bank {
        for (id, entry) in bank.iter() {
            c.put_tensor(&format!("bank.{id}"), entry.features.clone())?;
        }
    }
    Ok(c)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    trainer: &Trainer<'_>,
    config_toml: &str,
    metrics: &[EpochMetrics],
) -> Result<(), CheckpointError> {
    checkpoint_to_container(trainer, config_toml, metrics)?.save(path.as_ref())?;
    Ok(())
}

/// A parsed checkpoint, ready to interrogate or apply.
pub struct Checkpoint {
    meta: Meta,
    container: Container,
}

impl Checkpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_container(Container::load(path.as_ref())?)
    }

    pub fn from_container(container: Container) -> Result<Self, CheckpointError> {
        let meta: Meta = serde_json::from_str(container.text("meta")?)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Invalid(format!(
                "unsupported checkpoint format {} (expected {})",
                meta.format, CHECKPOINT_FORMAT
            )));
        }
        Ok(Self { meta, container })
    }

    pub fn variant(&self) -> Result<VariantKind, CheckpointError> {
        VariantKind::parse(&self.meta.variant)
            .map_err(|_| CheckpointError::Invalid(format!("unknown variant {}", self.meta.variant)))
    }

    pub fn config_toml(&self) -> Result<&str, CheckpointError> {
        Ok(self.container.text("config")?)
    }

    pub fn epochs_done(&self) -> usize {
        self.meta.epochs_done
    }

    pub fn iteration(&self) -> u64 {
        self.meta.iteration
    }

    pub fn metrics(&self) -> Result<Vec<EpochMetrics>, CheckpointError> {
        Ok(epoch_metrics_from_csv(self.container.text("metrics")?)?)
    }

    /// Overwrites a freshly built trainer's state with this checkpoint's.
    /// The trainer must have been constructed from the same configuration
    /// (same variant and parameter shapes).
    pub fn apply(&self, trainer: &mut Trainer<'_>) -> Result<(), CheckpointError> {
        if trainer.model.kind() != self.variant()? {
            return Err(CheckpointError::Invalid(format!(
                "checkpoint holds a {} model, trainer is {}",
                self.meta.variant,
                trainer.model.kind()
            )));
        }
        let stored_encoder: Vec<String> =
            trainer.encoder.store().iter().map(|(n, _)| n).collect();
        let stored_model: Vec<String> = trainer.model.store().iter().map(|(n, _)| n).collect();
        if stored_encoder != self.meta.encoder_params || stored_model != self.meta.model_params {
            return Err(CheckpointError::Invalid(
                "checkpoint parameter names do not match the trainer's".into(),
            ));
        }
        for name in &self.meta.encoder_params {
            let tensor = self.container.tensor(&format!("param.{name}"))?;
            trainer.encoder.store_mut().set_by_name(name, tensor.clone())?;
        }
        for name in &self.meta.model_params {
            let tensor = self.container.tensor(&format!("param.{name}"))?;
            trainer.model.store_mut().set_by_name(name, tensor.clone())?;
        }
        let mut adam_state = BTreeMap::new();
        for name in &self.meta.adam_params {
            let m = self.container.tensor(&format!("adam.m.{name}"))?;
            let v = self.container.tensor(&format!("adam.v.{name}"))?;
            adam_state.insert(
                name.clone(),
                AdamState {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                },
            );
        }
        trainer.optimizer.restore(self.meta.adam_step, adam_state);
        trainer.bank = match &self.meta.bank {
            None => None,
            Some(bm) => {
                if bm.ids.len() != bm.stamps.len() {
                    return Err(CheckpointError::Invalid(
                        "bank ids and stamps disagree in length".into(),
                    ));
                }
                let mut bank = FeatureBank::new(bm.feature_dim);
                for (id, stamps) in bm.ids.iter().zip(&bm.stamps) {
                    let features = self.container.tensor(&format!("bank.{id}"))?.clone();
                    bank.restore_entry(
                        *id,
                        BankEntry {
                            features,
                            stamps: stamps.clone(),
                        },
                    )?;
                }
                Some(bank)
            }
        };
        trainer.train_rng = self.meta.train_rng.restore();
        trainer.iteration = self.meta.iteration;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::TqnConfig;
    use crate::factorization::bundled;
    use crate::optim::OptimizerConfig;
    use crate::rngs::SeedBundle;
    use crate::schedule::{PhiMode, StageSchedule};
    use crate::synth::{gen_dataset, GeneratorConfig, SyntheticDataset};
    use crate::variants::VariantKind;

    fn tiny_dataset() -> SyntheticDataset {
        let schema = bundled::synthetic().unwrap();
        let cfg = GeneratorConfig {
            train_count: 16,
            test_count: 8,
            min_clips: 9,
            max_clips: 14,
            ..GeneratorConfig::default()
        };
        gen_dataset(&cfg, &schema, 11).unwrap()
    }

    fn tiny_trainer(ds: &SyntheticDataset) -> Trainer<'_> {
        let config = TqnConfig::for_schema(&ds.schema, 8, 8, 1, 2, 16, 0.1, 0.5);
        let optim = OptimizerConfig {
            batch_size: 8,
            ..OptimizerConfig::default()
        };
        Trainer::new(ds, VariantKind::Tqn, &config, optim, SeedBundle::default()).unwrap()
    }

    #[test]
    fn round_trip_restores_every_piece_of_state() {
        let ds = tiny_dataset();
        let schedule = StageSchedule {
            stage1_epochs: 1,
            stage1_max_frames: 60,
            stage2_epochs: 1,
            n_online: 4,
        };
        let mut t = tiny_trainer(&ds);
        let metrics = t
            .run_schedule(&schedule, PhiMode::BankUpdated, None)
            .unwrap();
        let container = checkpoint_to_container(&t, "config text", &metrics).unwrap();
        let ckpt = Checkpoint::from_container(container).unwrap();
        assert_eq!(ckpt.epochs_done(), 2);
        assert_eq!(ckpt.config_toml().unwrap(), "config text");
        assert_eq!(ckpt.metrics().unwrap(), metrics);

        let mut fresh = tiny_trainer(&ds);
        ckpt.apply(&mut fresh).unwrap();
        assert_eq!(fresh.iteration, t.iteration);
        assert_eq!(fresh.optimizer.step_count(), t.optimizer.step_count());
        assert_eq!(fresh.optimizer.state(), t.optimizer.state());
        assert_eq!(fresh.bank, t.bank);
        assert_eq!(
            RngState::capture(&fresh.train_rng),
            RngState::capture(&t.train_rng)
        );
        let collect = |tr: &Trainer<'_>| -> Vec<(String, Vec<f64>)> {
            tr.encoder
                .store()
                .iter()
                .chain(tr.model.store().iter())
                .map(|(n, p)| (n, p.data().to_vec()))
                .collect()
        };
        assert_eq!(collect(&fresh), collect(&t));
    }

    #[test]
    fn resumed_training_is_bit_identical_to_straight_through() {
        let ds = tiny_dataset();
        let schedule = StageSchedule {
            stage1_epochs: 1,
            stage1_max_frames: 60,
            stage2_epochs: 2,
            n_online: 4,
        };

        // Straight through.
        let mut straight = tiny_trainer(&ds);
        let log_straight = straight
            .run_schedule(&schedule, PhiMode::BankUpdated, None)
            .unwrap();

        // Stop after epoch 1 (mid-boundary: bank not yet created), resume.
        let mut first = tiny_trainer(&ds);
        let mut log = vec![first
            .run_planned_epoch(&schedule, 0, PhiMode::BankUpdated, None)
            .unwrap()];
        let container = checkpoint_to_container(&first, "", &log).unwrap();
        let mut bytes_a = Vec::new();
        container.write_to(&mut bytes_a).unwrap();

        let ckpt = Checkpoint::from_container(container).unwrap();
        let mut resumed = tiny_trainer(&ds);
        ckpt.apply(&mut resumed).unwrap();
        for epoch in ckpt.epochs_done()..schedule.total_epochs() {
            log.push(
                resumed
                    .run_planned_epoch(&schedule, epoch, PhiMode::BankUpdated, None)
                    .unwrap(),
            );
        }
        assert_eq!(log, log_straight);

        // And the final checkpoints byte-match.
        let mut final_a = Vec::new();
        checkpoint_to_container(&straight, "", &log_straight)
            .unwrap()
            .write_to(&mut final_a)
            .unwrap();
        let mut final_b = Vec::new();
        checkpoint_to_container(&resumed, "", &log)
            .unwrap()
            .write_to(&mut final_b)
            .unwrap();
        assert_eq!(final_a, final_b);
    }

    #[test]
    fn apply_rejects_wrong_variant() {
        let ds = tiny_dataset();
        let mut t = tiny_trainer(&ds);
        let _ = t
            .run_schedule(
                &StageSchedule {
                    stage1_epochs: 1,
                    stage1_max_frames: 60,
                    stage2_epochs: 0,
                    ..StageSchedule::default()
                },
                PhiMode::BankUpdated,
                None,
            )
            .unwrap();
        let ckpt =
            Checkpoint::from_container(checkpoint_to_container(&t, "", &[]).unwrap()).unwrap();
        let config = TqnConfig::for_schema(&ds.schema, 8, 8, 1, 2, 16, 0.1, 0.5);
        let mut other = Trainer::new(
            &ds,
            VariantKind::AvgPool,
            &config,
            OptimizerConfig::default(),
            SeedBundle::default(),
        )
        .unwrap();
        assert!(matches!(
            ckpt.apply(&mut other),
            Err(CheckpointError::Invalid(_))
        ));
    }
}
