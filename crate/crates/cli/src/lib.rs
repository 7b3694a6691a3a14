//! Command-line front end: argument parsing, configuration, run manifests and
//! input validation around the `metaper` library.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod validate;

use args::{Cli, Command};
use commands::Context;
use config::RunConfig;
use error::CliError;

/// Runs one parsed invocation inside a dedicated thread pool.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::from_file(cli.global.config.as_deref())?;
    config.validate()?;
    let threads = cli.global.threads.unwrap_or(1);
    if threads == 0 {
        return Err(CliError::invalid_config("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::new("THREAD_POOL", e.to_string(), error::EXIT_FAILURE))?;
    let ctx = Context {
        config,
        threads,
        run_manifest: cli.global.run_manifest,
    };
    pool.install(|| match &cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Mine(a) => commands::mine(&ctx, a),
        Command::MetaPersonalize(a) => commands::meta_personalize(&ctx, a),
        Command::Personalize(a) => commands::personalize(&ctx, a),
        Command::Query(a) => commands::query(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Validate(a) => validate::validate(a),
    })
}
