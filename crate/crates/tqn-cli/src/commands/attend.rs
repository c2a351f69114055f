//! `tqn attend`: export per-query attention over clips for chosen sequences.

use std::fs;
use std::time::Instant;

use tqn_core::evaluate::attention_to_csv;

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::AttendArgs;

pub fn run(args: &AttendArgs) -> CliResult<()> {
    let ctx = super::prepare(&args.config)?;
    let started = Instant::now();
    let dataset = super::load_dataset(&ctx)?;
    let (trainer, _ckpt) = super::run_eval::restore_trainer(&ctx, &dataset)?;
    let tqn = trainer.model.tqn().ok_or_else(|| {
        CliError::Config(format!(
            "attend needs a tqn checkpoint; this run holds `{}`",
            trainer.model.kind()
        ))
    })?;

    let mut manifest = RunManifest::new("attend", &ctx.loaded.effective_toml);
    for &id in &args.ids {
        let seq = dataset.sequence(id).ok_or_else(|| {
            CliError::Data(format!("sequence {id} is not in the dataset"))
        })?;
        let phi = trainer
            .encoder
            .encode_tensor(&seq.frames)
            .map_err(|e| CliError::Data(e.to_string()))?;
        let attention = tqn
            .extract_attention(&phi)
            .map_err(|e| CliError::Data(e.to_string()))?;
        let rel = format!("attention_{id}.csv");
        let path = ctx.out_dir.join(&rel);
        fs::write(&path, attention_to_csv(&dataset.schema, &attention))
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        manifest.add_artifact(&ctx.out_dir, &rel)?;
        println!("wrote {}", path.display());
    }
    manifest.add_timing("attend", started.elapsed().as_secs_f64());
    manifest.save(&ctx.out_dir.join("manifest-attend.json"))?;
    Ok(())
}
