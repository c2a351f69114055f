//! The training loop and its two-stage schedule.
//!
//! Stage 1 trains end-to-end on the short sequences (fewer frames than the
//! admission threshold) so the encoder becomes useful. Stage 2 fills the
//! feature bank from the stage-1 encoder and trains on every sequence, each
//! iteration re-encoding only a short random window online; the window's
//! fresh features are committed back to the bank after the optimiser step.
//!
//! One optimiser step builds one tape: every sequence loss of the batch is
//! summed (index order — sequences are not permuted within a step), scaled
//! by 1/B, and backpropagated once. Parameter gradients accumulate through
//! the shared staged leaves, so clips appearing in several sequences
//! contribute to the same encoder parameters exactly once per step.
//!
//! All stochastic choices of an epoch (shuffle, online windows, dropout) come
//! from the single train-stream generator in a fixed documented order; a
//! window covering a whole sequence consumes no randomness, which makes
//! full-window bank training replay end-to-end training bit for bit.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{sample_online_window, FeatureBank, OnlineWindow};
use crate::decoder::TqnConfig;
use crate::encoder::ToyEncoder;
use crate::evaluate::{evaluate, EvalMetrics};
use crate::factorization::FactorizationError;
use crate::optim::{Adam, OptimizerConfig};
use crate::rngs::{stream_rng, SeedBundle, STREAM_ENCODER_INIT, STREAM_MODEL_INIT, STREAM_TRAIN};
use crate::synth::{Split, SyntheticDataset, SyntheticSequence};
use crate::tensor::{Tape, TensorError, ValueId};
use crate::variants::{SequenceTarget, VariantError, VariantKind, VariantModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Variant(#[from] VariantError),
    #[error(transparent)]
    Schema(#[from] FactorizationError),
    #[error("training: {0}")]
    Other(String),
}

/// Epoch counts and admission thresholds of the two training stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub stage1_epochs: usize,
    /// Stage 1 admits a sequence iff its frame count is strictly below this.
    pub stage1_max_frames: usize,
    pub stage2_epochs: usize,
    /// Online window length (clips) of stage-2 bank training.
    pub n_online: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 6,
            stage1_max_frames: 81,
            stage2_epochs: 8,
            n_online: 8,
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stage1_epochs > 0 && self.stage1_max_frames == 0 {
            return Err(TrainError::Other(
                "stage 1 needs a positive frame threshold".into(),
            ));
        }
        if self.stage2_epochs > 0 && self.n_online == 0 {
            return Err(TrainError::Other(
                "stage 2 needs a positive online window".into(),
            ));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Which stage a global epoch index belongs to (1 or 2).
    pub fn stage_of(&self, epoch: usize) -> Result<u8, TrainError> {
        if epoch < self.stage1_epochs {
            Ok(1)
        } else if epoch < self.total_epochs() {
            Ok(2)
        } else {
            Err(TrainError::Other(format!(
                "epoch {epoch} is outside the {}-epoch schedule",
                self.total_epochs()
            )))
        }
    }
}

/// How clip features reach the model during a training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiMode {
    /// Every clip encoded online; gradients reach the encoder everywhere.
    Online,
    /// Bank features with a random online window, committed after the step.
    BankUpdated,
    /// Cached bank features only: no online window, no commits, and the
    /// encoder receives no gradient — the frozen-bank ablation.
    BankFrozen,
    /// A random contiguous crop of this fraction of the clips, encoded
    /// online; the model never sees the rest of the sequence.
    OnlineCrop(f64),
}

/// What a finished optimiser step committed to the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitRecord {
    pub sequence_id: u32,
    pub window: OnlineWindow,
}

/// Step-level instrumentation for tests and tooling.
pub struct StepInfo<'a> {
    /// 1-based count of completed optimiser steps.
    pub iteration: u64,
    pub batch_loss: f64,
    /// Encoder parameters as they were when the step's features were
    /// computed (before the optimiser update).
    pub pre_step_encoder: &'a ToyEncoder,
    pub commits: &'a [CommitRecord],
    pub bank: Option<&'a FeatureBank>,
}

/// Observes each optimiser step after bank commits have landed.
pub trait StepObserver {
    fn after_step(&mut self, info: &StepInfo<'_>);
}

/// Reborrows an optional observer for one call without consuming it.
fn reborrow<'s>(
    observer: &'s mut Option<&mut dyn StepObserver>,
) -> Option<&'s mut dyn StepObserver> {
    match observer {
        Some(o) => Some(&mut **o),
        None => None,
    }
}

/// Per-epoch log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub eval_per_video: f64,
    pub eval_per_class: f64,
}

/// `epoch,stage,train_loss,eval_per_video_acc,eval_per_class_acc` rows.
pub fn epoch_metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,stage,train_loss,eval_per_video_acc,eval_per_class_acc\n");
    for r in rows {
        // Plain float formatting round-trips exactly, so a parsed log
        // reproduces the original values bit for bit.
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.stage, r.train_loss, r.eval_per_video, r.eval_per_class
        ));
    }
    out
}

pub fn epoch_metrics_from_csv(text: &str) -> Result<Vec<EpochMetrics>, TrainError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "epoch,stage,train_loss,eval_per_video_acc,eval_per_class_acc" {
        return Err(TrainError::Other(format!(
            "unexpected metrics header `{header}`"
        )));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(TrainError::Other(format!("bad metrics row `{line}`")));
        }
        let bad = |what: &str| TrainError::Other(format!("bad {what} in `{line}`"));
        rows.push(EpochMetrics {
            epoch: f[0].parse().map_err(|_| bad("epoch"))?,
            stage: f[1].parse().map_err(|_| bad("stage"))?,
            train_loss: f[2].parse().map_err(|_| bad("train_loss"))?,
            eval_per_video: f[3].parse().map_err(|_| bad("eval_per_video"))?,
            eval_per_class: f[4].parse().map_err(|_| bad("eval_per_class"))?,
        });
    }
    Ok(rows)
}

/// Owns a variant model, the shared encoder, the optimiser, and the bank,
/// and drives them over a dataset.
pub struct Trainer<'a> {
    dataset: &'a SyntheticDataset,
    pub encoder: ToyEncoder,
    pub model: VariantModel,
    pub optimizer: Adam,
    pub bank: Option<FeatureBank>,
    pub train_rng: ChaCha8Rng,
    /// Completed optimiser steps.
    pub iteration: u64,
    targets: Vec<SequenceTarget>,
    n_online: usize,
}

/// Encoder defaults: hidden width between the input and feature widths.
pub const ENCODER_HIDDEN_DIM: usize = 48;

impl<'a> Trainer<'a> {
    /// Fresh models and optimiser from the seed bundle. The encoder and the
    /// variant draw from separate init streams, so all variants start from
    /// the identical encoder.
    pub fn new(
        dataset: &'a SyntheticDataset,
        kind: VariantKind,
        model_config: &TqnConfig,
        optimizer_config: OptimizerConfig,
        seeds: SeedBundle,
    ) -> Result<Self, TrainError> {
        let encoder = ToyEncoder::init(
            dataset.generator.clip_len,
            dataset.generator.input_dim,
            ENCODER_HIDDEN_DIM,
            model_config.feature_dim,
            &mut stream_rng(seeds.init, STREAM_ENCODER_INIT),
        )?;
        let model = VariantModel::init(
            kind,
            &dataset.schema,
            model_config,
            &mut stream_rng(seeds.init, STREAM_MODEL_INIT),
        )?;
        let mut targets = Vec::with_capacity(dataset.sequences.len());
        for seq in &dataset.sequences {
            targets.push(SequenceTarget::for_class(&dataset.schema, seq.class_index)?);
        }
        Ok(Self {
            dataset,
            encoder,
            model,
            optimizer: Adam::new(optimizer_config),
            bank: None,
            train_rng: stream_rng(seeds.train, STREAM_TRAIN),
            iteration: 0,
            targets,
            n_online: StageSchedule::default().n_online,
        })
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        self.dataset
    }

    pub fn target(&self, id: u32) -> &SequenceTarget {
        &self.targets[id as usize]
    }

    /// Fills (or refills) the bank by eval-mode encoding of every training
    /// sequence with the current encoder.
    pub fn init_bank(&mut self) -> Result<(), TrainError> {
        if self.dataset.train().is_empty() {
            return Err(TrainError::Other("cannot fill a bank from no data".into()));
        }
        let bank = FeatureBank::from_encoder(
            &self.encoder,
            self.dataset.train().iter().map(|s| (s.id, &s.frames)),
        )?;
        self.bank = Some(bank);
        Ok(())
    }

    /// One optimiser step over a batch of training-sequence ids.
    pub fn train_step(
        &mut self,
        batch: &[u32],
        mode: PhiMode,
        mut observer: Option<&mut dyn StepObserver>,
    ) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Other("empty batch".into()));
        }
        let encoder_trains = !matches!(mode, PhiMode::BankFrozen);
        let mut tape = Tape::new();
        let enc_staged = self.encoder.stage(&mut tape);
        let model_staged = self.model.stage(&mut tape);
        let mut pending_commits: Vec<(u32, OnlineWindow, ValueId)> = Vec::new();
        let mut losses = Vec::with_capacity(batch.len());

        for &id in batch {
            let seq = self
                .dataset
                .sequence(id)
                .ok_or_else(|| TrainError::Other(format!("unknown sequence id {id}")))?;
            let clip_len = seq.clip_len;
            let phi = match mode {
                PhiMode::Online => {
                    let frames = tape.leaf(&seq.frames);
                    self.encoder.encode(&mut tape, &enc_staged, frames)?
                }
                PhiMode::BankUpdated => {
                    let bank = self
                        .bank
                        .as_ref()
                        .ok_or_else(|| TrainError::Other("bank not initialised".into()))?;
                    let window =
                        sample_online_window(seq.clip_count(), self.n_online, &mut self.train_rng)?;
                    let slice = seq
                        .frames
                        .slice_rows(window.start * clip_len, window.len * clip_len)?;
                    let online_frames = tape.leaf(&slice);
                    let online = self.encoder.encode(&mut tape, &enc_staged, online_frames)?;
                    let full = bank.assemble(&mut tape, id, online, window)?;
                    pending_commits.push((id, window, online));
                    full
                }
                PhiMode::BankFrozen => {
                    let bank = self
                        .bank
                        .as_ref()
                        .ok_or_else(|| TrainError::Other("bank not initialised".into()))?;
                    let entry = bank
                        .entry(id)
                        .ok_or_else(|| TrainError::Other(format!("sequence {id} not banked")))?;
                    tape.leaf(&entry.features)
                }
                PhiMode::OnlineCrop(fraction) => {
                    if !(0.0..=1.0).contains(&fraction) || fraction <= 0.0 {
                        return Err(TrainError::Other(format!(
                            "crop fraction {fraction} outside (0, 1]"
                        )));
                    }
                    let t_v = seq.clip_count();
                    let crop = ((t_v as f64 * fraction).ceil() as usize).clamp(1, t_v);
                    let window = sample_online_window(t_v, crop, &mut self.train_rng)?;
                    let slice = seq
                        .frames
                        .slice_rows(window.start * clip_len, window.len * clip_len)?;
                    let frames = tape.leaf(&slice);
                    self.encoder.encode(&mut tape, &enc_staged, frames)?
                }
            };
            let loss = self.model.loss(
                &mut tape,
                &model_staged,
                phi,
                &self.targets[id as usize],
                Some(&mut self.train_rng),
            )?;
            losses.push(loss);
        }

        let total = tape.sum_scalars(&losses)?;
        let batch_loss = tape.scale(total, 1.0 / batch.len() as f64)?;
        tape.backward(batch_loss)?;

        let pre_step_encoder = observer.is_some().then(|| self.encoder.clone());

        self.model.store_mut().zero_grads();
        self.model
            .store_mut()
            .accumulate_grads(&tape, &model_staged, 1.0);
        let (encoder_lr, decoder_lr) = (
            self.optimizer.config().encoder_lr,
            self.optimizer.config().decoder_lr,
        );
        if encoder_trains {
            self.encoder.store_mut().zero_grads();
            self.encoder
                .store_mut()
                .accumulate_grads(&tape, &enc_staged, 1.0);
            self.optimizer.step(&mut [
                (self.encoder.store_mut(), encoder_lr),
                (self.model.store_mut(), decoder_lr),
            ])?;
        } else {
            self.encoder.store_mut().detach_grads();
            self.optimizer
                .step(&mut [(self.model.store_mut(), decoder_lr)])?;
        }
        self.iteration += 1;

        // Commit the pre-step features computed during the forward pass.
        let mut commits = Vec::with_capacity(pending_commits.len());
        if let Some(bank) = self.bank.as_mut() {
            for (id, window, online) in &pending_commits {
                bank.commit(*id, *window, tape.value(*online), self.iteration)?;
                commits.push(CommitRecord {
                    sequence_id: *id,
                    window: *window,
                });
            }
        }

        let loss_value = tape.value(batch_loss).item();
        if let Some(obs) = observer.as_deref_mut() {
            obs.after_step(&StepInfo {
                iteration: self.iteration,
                batch_loss: loss_value,
                pre_step_encoder: pre_step_encoder.as_ref().expect("cloned when observed"),
                commits: &commits,
                bank: self.bank.as_ref(),
            });
        }
        Ok(loss_value)
    }

    /// One epoch over the admitted training sequences: shuffle, then batched
    /// steps. Returns the sequence-weighted mean step loss.
    pub fn run_epoch(
        &mut self,
        mode: PhiMode,
        admit: impl Fn(&SyntheticSequence) -> bool,
        mut observer: Option<&mut dyn StepObserver>,
    ) -> Result<f64, TrainError> {
        let mut ids: Vec<u32> = self
            .dataset
            .train()
            .iter()
            .filter(|s| admit(s))
            .map(|s| s.id)
            .collect();
        if ids.is_empty() {
            return Err(TrainError::Other(
                "no training sequence admitted to this epoch".into(),
            ));
        }
        ids.shuffle(&mut self.train_rng);
        let batch_size = self.optimizer.config().batch_size.max(1);
        let mut weighted = 0.0;
        for batch in ids.chunks(batch_size) {
            let loss = self.train_step(batch, mode, reborrow(&mut observer))?;
            weighted += loss * batch.len() as f64;
        }
        Ok(weighted / ids.len() as f64)
    }

    /// Runs `epochs` epochs in one mode, evaluating the test split after each
    /// epoch; `stage` only labels the log rows.
    pub fn run_epochs(
        &mut self,
        mode: PhiMode,
        epochs: usize,
        stage: u8,
        admit: impl Fn(&SyntheticSequence) -> bool,
        log: &mut Vec<EpochMetrics>,
        mut observer: Option<&mut dyn StepObserver>,
    ) -> Result<(), TrainError> {
        if matches!(mode, PhiMode::BankUpdated | PhiMode::BankFrozen) && self.bank.is_none() {
            self.init_bank()?;
        }
        for _ in 0..epochs {
            let train_loss = self.run_epoch(mode, &admit, reborrow(&mut observer))?;
            let eval = self.evaluate(Split::Test)?;
            log.push(EpochMetrics {
                epoch: log.len(),
                stage,
                train_loss,
                eval_per_video: eval.per_video,
                eval_per_class: eval.per_class,
            });
        }
        Ok(())
    }

    /// Runs the epoch at one global index of the two-stage schedule: online
    /// training on short sequences in stage 1, `stage2_mode` on everything in
    /// stage 2 (the bank fills itself at the stage boundary when needed).
    /// Resumable training replays epochs through this one entry point, so a
    /// stopped-and-resumed run retraces a straight-through run exactly.
    pub fn run_planned_epoch(
        &mut self,
        schedule: &StageSchedule,
        epoch: usize,
        stage2_mode: PhiMode,
        observer: Option<&mut dyn StepObserver>,
    ) -> Result<EpochMetrics, TrainError> {
        schedule.validate()?;
        self.n_online = schedule.n_online;
        let stage = schedule.stage_of(epoch)?;
        let mode = if stage == 1 { PhiMode::Online } else { stage2_mode };
        if matches!(mode, PhiMode::BankUpdated | PhiMode::BankFrozen) && self.bank.is_none() {
            self.init_bank()?;
        }
        let threshold = schedule.stage1_max_frames;
        let train_loss = self.run_epoch(
            mode,
            |s| stage != 1 || s.frame_count() < threshold,
            observer,
        )?;
        let eval = self.evaluate(Split::Test)?;
        Ok(EpochMetrics {
            epoch,
            stage,
            train_loss,
            eval_per_video: eval.per_video,
            eval_per_class: eval.per_class,
        })
    }

    /// The standard two-stage schedule, straight through: end-to-end on short
    /// sequences, then `stage2_mode` on everything.
    pub fn run_schedule(
        &mut self,
        schedule: &StageSchedule,
        stage2_mode: PhiMode,
        mut observer: Option<&mut dyn StepObserver>,
    ) -> Result<Vec<EpochMetrics>, TrainError> {
        schedule.validate()?;
        let mut log = Vec::new();
        for epoch in 0..schedule.total_epochs() {
            log.push(self.run_planned_epoch(
                schedule,
                epoch,
                stage2_mode,
                reborrow(&mut observer),
            )?);
        }
        Ok(log)
    }

    /// Overrides the online window length used by bank training.
    pub fn set_n_online(&mut self, n_online: usize) {
        self.n_online = n_online;
    }

    /// Evaluates the current model with fully online features.
    pub fn evaluate(&self, split: Split) -> Result<EvalMetrics, TrainError> {
        Ok(evaluate(&self.model, &self.encoder, self.dataset, split)?)
    }
}
