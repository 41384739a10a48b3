use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jcpulse_cli::{execute, exit, parse_config, CliError, Mode, RunSpec, OUTPUT_ROOT_VAR};
use rayon::prelude::*;

/// Pulsed Jaynes–Cummings simulations with input–output channels.
#[derive(Parser)]
#[command(name = "jcpulse", version)]
struct Cli {
    /// Directory the run directories are created in [env: JCPULSE_OUTPUT_ROOT, default: .]
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more configurations and write the requested artifacts.
    Run {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Run only the equivalence check of a configuration.
    Verify { config: PathBuf },
    /// Repeat a run at several truncations and report the changes.
    Sweep {
        config: PathBuf,
        /// Comma-separated, strictly increasing n_max values.
        #[arg(long, value_delimiter = ',', required = true)]
        nmax: Vec<usize>,
    },
}

fn report(err: &CliError) -> u8 {
    eprintln!("error: {err}");
    err.exit_code()
}

fn parse_all(paths: &[PathBuf]) -> Result<Vec<RunSpec>, u8> {
    let mut specs = Vec::new();
    let mut code = exit::PASS;
    for path in paths {
        match parse_config(path) {
            Ok(spec) => specs.push(spec),
            Err(e) => code = code.max(report(&e)),
        }
    }
    let mut seen = BTreeSet::new();
    for spec in &specs {
        if !seen.insert(spec.output_dir.clone()) {
            eprintln!(
                "error: {}: output directory `{}` is used by another config in this batch",
                spec.source.display(),
                spec.output_dir.display()
            );
            code = exit::INVALID_INPUT;
        }
    }
    if code == exit::PASS {
        Ok(specs)
    } else {
        Err(code)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let root = cli
        .output_root
        .or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));

    let (paths, mode) = match cli.command {
        Command::Run { configs } => (configs, Mode::Run),
        Command::Verify { config } => (vec![config], Mode::Verify),
        Command::Sweep { config, nmax } => (vec![config], Mode::Sweep(nmax)),
    };
    let specs = match parse_all(&paths) {
        Ok(specs) => specs,
        Err(code) => return ExitCode::from(code),
    };
    log::info!("executing {} run(s) under {}", specs.len(), root.display());

    let results: Vec<_> = specs.par_iter().map(|spec| execute(spec, &mode, &root)).collect();
    let mut code = exit::PASS;
    for result in results {
        code = code.max(match result {
            Ok(outcome) => {
                print!("{}", outcome.render());
                outcome.exit_code()
            }
            Err(e) => report(&e),
        });
    }
    ExitCode::from(code)
}
