//! `tqn grad-check`: finite-difference verification of training gradients.

use std::time::Instant;

use tqn_core::factorization::bundled;
use tqn_core::gradcheck::check_training_gradients;
use tqn_core::variants::VariantKind;

use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult};
use crate::GradCheckArgs;

/// Largest acceptable relative error between backprop and central
/// differences.
pub const TOLERANCE: f64 = 1e-4;

pub fn run(args: &GradCheckArgs) -> CliResult<()> {
    let schema = match &args.config {
        Some(path) => LoadedConfig::load(path, None, &[])?.load_schema()?,
        None => bundled::synthetic().map_err(|e| CliError::Data(e.to_string()))?,
    };
    let variants: Vec<VariantKind> = if args.variants.is_empty() {
        vec![
            VariantKind::Tqn,
            VariantKind::SelfAttnCls,
            VariantKind::Seq2Seq,
        ]
    } else {
        args.variants
            .iter()
            .map(|s| VariantKind::parse(s).map_err(|e| CliError::Config(e.to_string())))
            .collect::<CliResult<_>>()?
    };
    if args.seeds == 0 {
        return Err(CliError::Config("need at least one seed".into()));
    }

    let started = Instant::now();
    let mut failed = Vec::new();
    for kind in &variants {
        let mut worst = 0.0f64;
        let mut worst_seed = 0;
        for seed in 0..args.seeds {
            let check = check_training_gradients(&schema, *kind, seed)
                .map_err(|e| CliError::Data(format!("{kind} seed {seed}: {e}")))?;
            if check.max_rel_error > worst {
                worst = check.max_rel_error;
                worst_seed = seed;
            }
        }
        let ok = worst < TOLERANCE;
        println!(
            "{:<14} worst {:.3e} over {} seeds (seed {}) {}",
            kind.to_string(),
            worst,
            args.seeds,
            worst_seed,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(kind.to_string());
        }
    }
    println!("checked in {:.1}s", started.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gate(format!(
            "gradient mismatch above {TOLERANCE:.0e} in: {}",
            failed.join(", ")
        )))
    }
}
