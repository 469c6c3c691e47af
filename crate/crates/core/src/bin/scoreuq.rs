use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use scoreuq::cli::{execute, RunOptions, THREADS_ENV};

/// Score-variance uncertainty for diffusion samplers.
///
/// COMMAND is one of train, sample, guide, filter-eval, sparsify-eval,
/// verify-identity, profile, bench. The config's "command" field must match.
#[derive(Parser, Debug)]
#[command(name = "scoreuq", version)]
struct Args {
    command: String,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = THREADS_ENV)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let options = RunOptions {
        config: args.config,
        out: args.out,
        seed: args.seed,
        threads: args.threads,
    };
    match execute(&args.command, &options) {
        Ok(manifest) => {
            println!("{} files written to {}", manifest.files.len(), options.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("scoreuq {}: {e}", args.command);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
