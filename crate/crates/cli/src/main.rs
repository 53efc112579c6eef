//! `flipflop`: run, validate and list virtual experiments.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use flipflop::experiment::{self, ExperimentError, ExperimentKind, ExperimentSpec};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "flipflop", version, about = "Flip-flop qubit virtual experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write data.csv, metadata.json and any extra files.
    Run {
        /// Experiment spec (TOML, or a metadata.json from an earlier run).
        spec: PathBuf,
        /// Output directory.
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        /// Worker threads; defaults to the number of cores.
        #[arg(short = 'j', long)]
        threads: Option<usize>,
        /// Print the summary as JSON on stdout.
        #[arg(long)]
        json: bool,
    },
    /// Check a spec and print every problem found.
    Validate { spec: PathBuf },
    /// List the supported experiment kinds.
    ListKinds,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListKinds => {
            for k in ExperimentKind::ALL {
                println!("{:<22} {}", k.name(), k.description());
            }
            ExitCode::SUCCESS
        }
        Command::Validate { spec } => {
            let diags = experiment::validate_file(&spec);
            if diags.is_empty() {
                println!("{}: ok", spec.display());
                ExitCode::SUCCESS
            } else {
                for d in &diags {
                    eprintln!("{}: {d}", spec.display());
                }
                ExitCode::from(EXIT_VALIDATION)
            }
        }
        Command::Run { spec, out, threads, json } => {
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_RUNTIME);
                }
            }
            let parsed = match ExperimentSpec::load(&spec) {
                Ok(s) => s,
                Err(diags) => {
                    for d in &diags {
                        eprintln!("{}: {d}", spec.display());
                    }
                    return ExitCode::from(EXIT_VALIDATION);
                }
            };
            let start = Instant::now();
            match experiment::run(&parsed, &out) {
                Ok((result, written)) => {
                    if json {
                        println!("{}", serde_json::to_string_pretty(&result.summary).unwrap_or_default());
                    } else {
                        println!("{} (seed {}) finished in {:.2} s", parsed.kind, parsed.seed, start.elapsed().as_secs_f64());
                        for p in written {
                            println!("  {}", p.display());
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(ExperimentError::Validation(diags)) => {
                    for d in &diags {
                        eprintln!("{}: {d}", spec.display());
                    }
                    ExitCode::from(EXIT_VALIDATION)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
    }
}
