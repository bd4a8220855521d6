use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;

use commands::CliError;

/// Score-matching training, Langevin sampling and calibration metrics for
/// marked temporal point processes.
#[derive(Debug, Parser)]
#[command(name = "scoretpp", version)]
struct Cli {
    /// Worker threads for training and sampling (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a multivariate Hawkes corpus by thinning.
    Simulate {
        /// JSON file with `mu`, `alpha`, `beta`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        t_max: f64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition a sequence file into train/dev/test files inside a directory.
    Split {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated train,dev,test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus `<out>.log`.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Sequence file, or a directory holding train.jsonl and dev.jsonl.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one-step-ahead samples for every event of a test file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Sequence file, or a directory holding test.jsonl.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        algorithm: Option<String>,
        #[arg(long)]
        num_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact samples from known Hawkes parameters, in the sample-file layout.
    Oracle {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        num_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a sample file; writes the JSON report and a `.csv` of curves.
    Evaluate {
        #[arg(long)]
        samples: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Shipped hyperparameter set.
    #[arg(long)]
    profile: Option<String>,
    /// Config file of `section.key = value` lines, applied over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: OverrideArgs,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct OverrideArgs {
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate {
            params,
            t_max,
            count,
            seed,
            out,
        } => commands::simulate(&params, t_max, count, seed, &out),
        Command::Split { data, ratios, seed, out } => commands::split(&data, &ratios, seed, &out),
        Command::Train { run, epochs, data, out } => {
            let mut cfg = commands::load_config(run.profile.as_deref(), run.config.as_deref(), &run.overrides.set)?;
            if let Some(seed) = run.seed {
                cfg.set("seed", &seed.to_string())?;
            }
            if let Some(epochs) = epochs {
                cfg.train.epochs = epochs;
            }
            commands::train(cfg, data.as_deref(), &out)
        }
        Command::Sample {
            checkpoint,
            overrides,
            data,
            algorithm,
            num_samples,
            seed,
            out,
        } => commands::sample(
            &checkpoint,
            &overrides.set,
            data.as_deref(),
            algorithm.as_deref(),
            num_samples,
            seed,
            &out,
        ),
        Command::Oracle {
            params,
            data,
            num_samples,
            seed,
            out,
        } => commands::oracle(&params, &data, num_samples, seed, &out),
        Command::Evaluate { samples, run, out } => {
            let cfg = commands::load_config(run.profile.as_deref(), run.config.as_deref(), &run.overrides.set)?;
            commands::evaluate(&samples, &cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
