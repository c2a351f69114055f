//! `tqn gen-data`: synthesise the benchmark dataset named by a config.

use std::fs;
use std::time::Instant;

use tqn_core::synth::gen_dataset;

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::ConfigArgs;

pub fn run(args: &ConfigArgs) -> CliResult<()> {
    let ctx = super::prepare(args)?;
    let started = Instant::now();
    ctx.loaded
        .cfg
        .generator
        .validate(&ctx.schema)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let dataset = gen_dataset(
        &ctx.loaded.cfg.generator,
        &ctx.schema,
        ctx.loaded.cfg.seeds.data,
    )
    .map_err(|e| CliError::Data(e.to_string()))?;

    let path = ctx.loaded.dataset_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    dataset
        .save(&path)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))?;

    let mut manifest = RunManifest::new("gen-data", &ctx.loaded.effective_toml);
    let rel = relative_to(&path, &ctx.out_dir);
    manifest.add_artifact(rel.base, &rel.path)?;
    manifest.add_timing("gen_data", started.elapsed().as_secs_f64());
    manifest.save(&ctx.out_dir.join("manifest-gen-data.json"))?;

    println!(
        "generated {} train + {} test sequences over {} classes -> {}",
        dataset.train().len(),
        dataset.test().len(),
        ctx.schema.class_count(),
        path.display()
    );
    Ok(())
}

struct Rel<'a> {
    base: &'a std::path::Path,
    path: String,
}

/// Records dataset paths relative to the run directory when they live under
/// it, absolute otherwise.
fn relative_to<'a>(path: &'a std::path::Path, base: &'a std::path::Path) -> Rel<'a> {
    match path.strip_prefix(base) {
        Ok(rel) => Rel {
            base,
            path: rel.to_string_lossy().into_owned(),
        },
        Err(_) => Rel {
            base: std::path::Path::new("/"),
            path: path
                .strip_prefix("/")
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned(),
        },
    }
}
