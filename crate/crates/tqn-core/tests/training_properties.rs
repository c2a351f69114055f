//! Learning smoke properties: the training loop actually reduces loss on an
//! easy planted task, and the autoregressive baseline can memorise a single
//! sequence to numerically negligible teacher-forced loss.

use tqn_core::decoder::TqnConfig;
use tqn_core::factorization::bundled;
use tqn_core::optim::OptimizerConfig;
use tqn_core::rngs::SeedBundle;
use tqn_core::schedule::{PhiMode, Trainer};
use tqn_core::synth::{gen_dataset, GeneratorConfig, SyntheticDataset};
use tqn_core::variants::VariantKind;

fn toy_dataset(train: usize, test: usize) -> SyntheticDataset {
    let schema = bundled::synthetic().unwrap();
    let generator = GeneratorConfig {
        train_count: train,
        test_count: test,
        min_clips: 9,
        max_clips: 14,
        ..GeneratorConfig::default()
    };
    gen_dataset(&generator, &schema, 11).unwrap()
}

#[test]
fn decoder_loss_falls_on_the_planted_task() {
    let dataset = toy_dataset(48, 8);
    let config = TqnConfig::for_schema(&dataset.schema, 16, 16, 2, 2, 32, 0.1, 0.5);
    let optimizer = OptimizerConfig {
        encoder_lr: 1e-3,
        decoder_lr: 1e-3,
        batch_size: 8,
        ..OptimizerConfig::default()
    };
    let mut trainer = Trainer::new(
        &dataset,
        VariantKind::Tqn,
        &config,
        optimizer,
        SeedBundle::default(),
    )
    .unwrap();

    let first = trainer.run_epoch(PhiMode::Online, |_| true, None).unwrap();
    let mut last = first;
    for _ in 0..15 {
        last = trainer.run_epoch(PhiMode::Online, |_| true, None).unwrap();
    }
    assert!(
        last < 0.6 * first,
        "mean step loss should fall markedly: first epoch {first}, last epoch {last}"
    );
}

#[test]
fn frozen_bank_training_still_reduces_decoder_loss() {
    let dataset = toy_dataset(48, 8);
    let config = TqnConfig::for_schema(&dataset.schema, 16, 16, 2, 2, 32, 0.1, 0.5);
    let optimizer = OptimizerConfig {
        decoder_lr: 1e-3,
        batch_size: 8,
        ..OptimizerConfig::default()
    };
    let mut trainer = Trainer::new(
        &dataset,
        VariantKind::Tqn,
        &config,
        optimizer,
        SeedBundle::default(),
    )
    .unwrap();
    trainer.init_bank().unwrap();

    let first = trainer
        .run_epoch(PhiMode::BankFrozen, |_| true, None)
        .unwrap();
    let mut last = first;
    for _ in 0..7 {
        last = trainer
            .run_epoch(PhiMode::BankFrozen, |_| true, None)
            .unwrap();
    }
    assert!(
        last < first,
        "decoder-only training should still make progress: {first} -> {last}"
    );
}

#[test]
fn seq2seq_memorises_one_sequence_to_negligible_loss() {
    let dataset = toy_dataset(1, 1);
    let config = TqnConfig::for_schema(&dataset.schema, 16, 16, 1, 2, 32, 0.0, 0.0);
    let optimizer = OptimizerConfig {
        encoder_lr: 1e-2,
        decoder_lr: 1e-2,
        weight_decay: 0.0,
        batch_size: 1,
        ..OptimizerConfig::default()
    };
    let mut trainer = Trainer::new(
        &dataset,
        VariantKind::Seq2Seq,
        &config,
        optimizer,
        SeedBundle::default(),
    )
    .unwrap();

    let id = dataset.train()[0].id;
    let mut loss = f64::INFINITY;
    for _ in 0..8000 {
        loss = trainer.train_step(&[id], PhiMode::Online, None).unwrap();
        if loss < 1e-6 {
            break;
        }
    }
    assert!(
        loss < 1e-6,
        "teacher-forced loss should vanish on a memorised sequence, got {loss}"
    );
}
