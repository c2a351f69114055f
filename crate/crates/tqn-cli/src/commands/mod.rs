//! Subcommand implementations.

pub mod attend;
pub mod gen_data;
pub mod grad_check;
pub mod report;
pub mod run_eval;
pub mod train;
pub mod validate_schema;

use std::fs;
use std::path::PathBuf;

use tqn_core::factorization::FactorizationSchema;
use tqn_core::synth::SyntheticDataset;

use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult};
use crate::lock::DirLock;
use crate::ConfigArgs;

/// Config + schema + locked output directory: the shared preamble of every
/// command that works inside a run directory.
pub struct RunContext {
    pub loaded: LoadedConfig,
    pub schema: FactorizationSchema,
    pub out_dir: PathBuf,
    _lock: DirLock,
}

pub fn prepare(args: &ConfigArgs) -> CliResult<RunContext> {
    let loaded = LoadedConfig::load(
        &args.config,
        args.out.as_deref(),
        &args.seed_override,
    )?;
    let schema = loaded.load_schema()?;
    let out_dir = loaded.output_dir();
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let lock = DirLock::acquire(&out_dir)?;
    Ok(RunContext {
        loaded,
        schema,
        out_dir,
        _lock: lock,
    })
}

/// Loads the dataset named by the config, checking that it was generated for
/// the same schema the config references.
pub fn load_dataset(ctx: &RunContext) -> CliResult<SyntheticDataset> {
    let path = ctx.loaded.dataset_path();
    if !path.is_file() {
        return Err(CliError::Data(format!(
            "dataset not found: {} (generate it with `tqn gen-data`)",
            path.display()
        )));
    }
    let dataset = SyntheticDataset::load(&path)
        .map_err(|e| CliError::Data(format!("loading {}: {e}", path.display())))?;
    if dataset.schema.to_csv_strings() != ctx.schema.to_csv_strings() {
        return Err(CliError::Config(format!(
            "dataset {} was generated for a different schema than {}",
            path.display(),
            ctx.loaded.queries_path().display()
        )));
    }
    Ok(dataset)
}
