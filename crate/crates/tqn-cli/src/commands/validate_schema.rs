//! `tqn validate-schema`: load a factorisation schema and print its shape.

use tqn_core::factorization::FactorizationSchema;

use crate::error::{CliError, CliResult};
use crate::ValidateSchemaArgs;

pub fn run(args: &ValidateSchemaArgs) -> CliResult<()> {
    let schema = FactorizationSchema::load(&args.queries, &args.classes)
        .map_err(|e| CliError::Config(e.to_string()))?;
    println!(
        "schema ok: {} queries, {} classes",
        schema.query_count(),
        schema.class_count()
    );
    for (query, arity) in schema.queries().iter().zip(schema.arities()) {
        println!("  {}: {} answers (incl. the null answer)", query.name, arity);
    }
    Ok(())
}
