use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mfc_lab::cli::{run, RunOptions, Subcommand};

/// Constrained mean-field control experiments.
#[derive(Debug, Parser)]
#[command(name = "mfc-lab", version)]
struct Args {
    #[arg(value_enum)]
    command: Subcommand,
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override a config key, e.g. `--set solver.delta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Write per-step trajectory records as JSON lines.
    #[arg(long)]
    dump_trajectories: bool,
    /// Do not print console tables.
    #[arg(long, short)]
    quiet: bool,
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
    let opts = RunOptions {
        overrides: args.set,
        out_dir: args.out_dir,
        dump_trajectories: args.dump_trajectories,
        quiet: args.quiet,
    };
    match run(args.command, &args.config, &opts) {
        Ok(files) => {
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
