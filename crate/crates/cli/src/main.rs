use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use weakform::output::write_outputs;
use weakform::{run, Experiment, ExperimentConfig};

/// Weak-form regularised variational inference experiments.
#[derive(Debug, Parser)]
#[command(name = "weakform", version)]
struct Args {
    experiment: Experiment,
    /// JSON file with experiment settings.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config thread count.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = ExperimentConfig::from_file(&args.config).and_then(|mut cfg| {
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(t) = args.threads {
            cfg.threads = t;
        }
        cfg.experiment = Some(cfg.experiment.unwrap_or(args.experiment));
        let out = run(args.experiment, &cfg)?;
        write_outputs(&args.out, &cfg, &out)?;
        Ok(out.rows.len())
    });
    match result {
        Ok(n) => {
            eprintln!("{}: wrote {n} rows to {}", args.experiment.name(), args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
