//! `tqn eval`: evaluate a checkpoint; also the shared final-artifact export.

use std::fs;
use std::path::Path;
use std::time::Instant;

use tqn_core::checkpoint::Checkpoint;
use tqn_core::evaluate::{evaluate, localization_score, predictions_to_csv};
use tqn_core::schedule::Trainer;
use tqn_core::synth::{Split, SyntheticDataset};

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::summary::{LocalizationSummary, RunSummary};
use crate::{EvalArgs, SplitArg};

/// Evaluates the test split, writes `predictions.csv` and `summary.json`
/// into `out_dir`, and returns the summary.
pub fn export_final_artifacts(
    trainer: &Trainer<'_>,
    dataset: &SyntheticDataset,
    label: &str,
    epochs: usize,
    out_dir: &Path,
) -> CliResult<RunSummary> {
    let metrics = evaluate(&trainer.model, &trainer.encoder, dataset, Split::Test)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let predictions_path = out_dir.join("predictions.csv");
    fs::write(&predictions_path, predictions_to_csv(&metrics.predictions)).map_err(|e| {
        CliError::Data(format!("cannot write {}: {e}", predictions_path.display()))
    })?;
    let localization = match trainer.model.tqn() {
        Some(tqn) => {
            let report = localization_score(tqn, &trainer.encoder, dataset, Split::Test)
                .map_err(|e| CliError::Data(e.to_string()))?;
            Some(LocalizationSummary {
                hit_fraction: report.hit_fraction,
                chance_rate: report.chance_rate,
                hits: report.hits,
                total: report.total,
            })
        }
        None => None,
    };
    let summary = RunSummary {
        label: label.to_string(),
        variant: trainer.model.kind().as_str().to_string(),
        epochs,
        per_video_acc: metrics.per_video,
        per_class_acc: metrics.per_class,
        localization,
    };
    summary.save(&out_dir.join("summary.json"))?;
    Ok(summary)
}

/// Rebuilds a trainer from the run's config and overwrites its state with
/// the run's checkpoint.
pub fn restore_trainer<'a>(
    ctx: &super::RunContext,
    dataset: &'a SyntheticDataset,
) -> CliResult<(Trainer<'a>, Checkpoint)> {
    let ckpt_path = ctx.out_dir.join("checkpoint.tqn");
    if !ckpt_path.is_file() {
        return Err(CliError::Data(format!(
            "checkpoint not found: {} (train first)",
            ckpt_path.display()
        )));
    }
    let ckpt = Checkpoint::load(&ckpt_path)
        .map_err(|e| CliError::Data(format!("loading {}: {e}", ckpt_path.display())))?;
    let mut trainer = Trainer::new(
        dataset,
        ctx.loaded.variant()?,
        &ctx.loaded.cfg.model.tqn_config(&ctx.schema),
        ctx.loaded.cfg.optimizer.into(),
        ctx.loaded.cfg.seeds.into(),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    ckpt.apply(&mut trainer)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((trainer, ckpt))
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let ctx = super::prepare(&args.config)?;
    let started = Instant::now();
    let dataset = super::load_dataset(&ctx)?;
    let (trainer, ckpt) = restore_trainer(&ctx, &dataset)?;

    let mut manifest = RunManifest::new("eval", &ctx.loaded.effective_toml);
    match args.split {
        SplitArg::Test => {
            let summary = export_final_artifacts(
                &trainer,
                &dataset,
                &ctx.loaded.label(),
                ckpt.epochs_done(),
                &ctx.out_dir,
            )?;
            manifest.add_artifact(&ctx.out_dir, "predictions.csv")?;
            manifest.add_artifact(&ctx.out_dir, "summary.json")?;
            println!(
                "{}: per-video {:.4}, per-class {:.4}{}",
                summary.label,
                summary.per_video_acc,
                summary.per_class_acc,
                match &summary.localization {
                    Some(l) => format!(
                        ", localization {:.4} (chance {:.4})",
                        l.hit_fraction, l.chance_rate
                    ),
                    None => String::new(),
                }
            );
        }
        SplitArg::Train => {
            let metrics = evaluate(&trainer.model, &trainer.encoder, &dataset, Split::Train)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let path = ctx.out_dir.join("predictions-train.csv");
            fs::write(&path, predictions_to_csv(&metrics.predictions))
                .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
            manifest.add_artifact(&ctx.out_dir, "predictions-train.csv")?;
            println!(
                "{} (train split): per-video {:.4}, per-class {:.4}",
                ctx.loaded.label(),
                metrics.per_video,
                metrics.per_class
            );
        }
    }
    manifest.add_timing("eval", started.elapsed().as_secs_f64());
    manifest.save(&ctx.out_dir.join("manifest-eval.json"))?;
    Ok(())
}
