use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use entk_dmft::harness::{configure_threads, resolve_threads, run_file, RunOptions};

/// Runs one experiment mode from a JSON config.
#[derive(Parser, Debug)]
#[command(name = "entk-dmft", version)]
struct Cli {
    /// train, lazy, dmft, linear, exact2, finite-size or figure
    mode: String,
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to ENTK_DMFT_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = resolve_threads(cli.threads)
        .and_then(configure_threads)
        .and_then(|_| {
            let opts = RunOptions {
                out_dir: cli.out,
                seed: cli.seed,
            };
            run_file(&cli.mode, &cli.config, &opts)
        });
    match result {
        Ok(manifest) => {
            let failed: Vec<_> = manifest
                .convergence
                .iter()
                .filter(|(_, ok)| !**ok)
                .map(|(k, _)| k.as_str())
                .collect();
            if !failed.is_empty() {
                eprintln!("entk-dmft: not converged: {}", failed.join(", "));
            }
            println!(
                "{} done in {:.1}s, {} files, content {}",
                manifest.mode,
                manifest.wall_clock_seconds,
                manifest.outputs.len(),
                &manifest.content_hash[..16]
            );
            ExitCode::from(manifest.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("entk-dmft: {e}");
            ExitCode::from(1)
        }
    }
}
