//! `tqn train`: run (or resume) the two-stage schedule for one variant.

use std::fs;
use std::time::Instant;

use tqn_core::checkpoint::{save_checkpoint, Checkpoint};
use tqn_core::schedule::{epoch_metrics_to_csv, EpochMetrics, Trainer};

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::TrainArgs;

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let ctx = super::prepare(&args.config)?;
    let started = Instant::now();
    let dataset = super::load_dataset(&ctx)?;
    let schedule = ctx.loaded.cfg.schedule.stage_schedule();
    let phi_mode = ctx.loaded.cfg.schedule.phi_mode()?;
    let total_epochs = schedule.total_epochs();

    // Model/schema agreement is checked here, before any training step.
    let mut trainer = Trainer::new(
        &dataset,
        ctx.loaded.variant()?,
        &ctx.loaded.cfg.model.tqn_config(&ctx.schema),
        ctx.loaded.cfg.optimizer.into(),
        ctx.loaded.cfg.seeds.into(),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let ckpt_path = ctx.out_dir.join("checkpoint.tqn");
    let mut metrics: Vec<EpochMetrics> = Vec::new();
    if ckpt_path.is_file() {
        let ckpt = Checkpoint::load(&ckpt_path)
            .map_err(|e| CliError::Data(format!("loading {}: {e}", ckpt_path.display())))?;
        let stored = ckpt
            .config_toml()
            .map_err(|e| CliError::Data(e.to_string()))?;
        if stored != ctx.loaded.effective_toml {
            return Err(CliError::Config(format!(
                "{} belongs to a different configuration; delete it or change output_dir",
                ckpt_path.display()
            )));
        }
        ckpt.apply(&mut trainer)
            .map_err(|e| CliError::Config(e.to_string()))?;
        metrics = ckpt.metrics().map_err(|e| CliError::Data(e.to_string()))?;
        println!(
            "resuming from {} ({} of {} epochs done)",
            ckpt_path.display(),
            metrics.len(),
            total_epochs
        );
    }

    let stop_at = args.stop_after.unwrap_or(total_epochs).min(total_epochs);
    while metrics.len() < stop_at {
        let epoch = metrics.len();
        let row = trainer
            .run_planned_epoch(&schedule, epoch, phi_mode, None)
            .map_err(|e| CliError::Data(format!("epoch {epoch}: {e}")))?;
        println!(
            "epoch {}/{} (stage {}): train loss {:.4}, test acc {:.4}/{:.4}",
            row.epoch + 1,
            total_epochs,
            row.stage,
            row.train_loss,
            row.eval_per_video,
            row.eval_per_class
        );
        metrics.push(row);
        let csv_path = ctx.out_dir.join("metrics.csv");
        fs::write(&csv_path, epoch_metrics_to_csv(&metrics))
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", csv_path.display())))?;
        save_checkpoint(&ckpt_path, &trainer, &ctx.loaded.effective_toml, &metrics)
            .map_err(|e| CliError::Data(format!("writing {}: {e}", ckpt_path.display())))?;
    }

    let mut manifest = RunManifest::new("train", &ctx.loaded.effective_toml);
    if metrics.is_empty() {
        return Err(CliError::Config(
            "schedule has no epochs to run (stop_after 0 or empty schedule)".into(),
        ));
    }
    manifest.add_artifact(&ctx.out_dir, "metrics.csv")?;
    manifest.add_artifact(&ctx.out_dir, "checkpoint.tqn")?;
    if metrics.len() == total_epochs {
        let summary = super::run_eval::export_final_artifacts(
            &trainer,
            &dataset,
            &ctx.loaded.label(),
            metrics.len(),
            &ctx.out_dir,
        )?;
        manifest.add_artifact(&ctx.out_dir, "predictions.csv")?;
        manifest.add_artifact(&ctx.out_dir, "summary.json")?;
        println!(
            "done: per-video {:.4}, per-class {:.4}{}",
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
    } else {
        println!(
            "stopped after {} of {} epochs (checkpoint saved)",
            metrics.len(),
            total_epochs
        );
    }
    manifest.add_timing("train", started.elapsed().as_secs_f64());
    manifest.save(&ctx.out_dir.join("manifest-train.json"))?;
    Ok(())
}
