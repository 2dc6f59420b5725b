use std::path::PathBuf;
use std::process::ExitCode;

use brainage::experiment::{
    cmd_predict, cmd_pretrain, cmd_report, cmd_synth, cmd_train, output_dir_from_env, ExperimentConfig, ExperimentError,
    RunOptions, EXIT_PARTIAL,
};
use clap::{Args, Parser, Subcommand};

/// Brain-age experiments: synthesize, pre-train, train, predict, report.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Redo stages whose outputs exist; regenerate synthetic data.
    #[arg(long)]
    force: bool,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// No progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort and its manifests.
    Synth(Common),
    /// Segmentation pre-training, one backbone per seed.
    Pretrain(Common),
    /// Early-stopped training per seed, then retraining on train + val.
    Train(Common),
    /// Predict a manifest with one checkpoint, or every seed's final model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the test manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate prediction CSVs (default: every seed's) into a report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report CSV; the text table goes next to it as .txt.
        #[arg(long)]
        out: Option<PathBuf>,
        predictions: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c) | Command::Pretrain(c) | Command::Train(c) => c,
            Command::Predict { common, .. } | Command::Report { common, .. } => common,
        }
    }
}

fn run(cli: &Cli) -> Result<i32, ExperimentError> {
    let common = cli.command.common();
    let cfg = ExperimentConfig::load(&common.config)?;
    let opts = RunOptions {
        force: common.force,
        seeds: common.seeds.clone(),
        out_dir: output_dir_from_env(),
        verbose: !common.quiet,
    };
    match &cli.command {
        Command::Synth(_) => {
            let s = cmd_synth(&cfg, &opts)?;
            println!("train {} val {} test {} pretrain {}", s.train, s.val, s.test, s.pretrain);
        }
        Command::Pretrain(_) => {
            for dir in cmd_pretrain(&cfg, &opts)? {
                println!("{}", dir.display());
            }
        }
        Command::Train(_) => {
            let s = cmd_train(&cfg, &opts)?;
            for stop in &s.early {
                println!("seed {} stopped at epoch {} (val MAE {:.3})", stop.seed, stop.stopped_epoch, stop.best_val_mae);
            }
            println!("retrain budget {} epochs", s.budget);
            for dir in &s.finals {
                println!("{}", dir.display());
            }
        }
        Command::Predict { checkpoint, manifest, out, .. } => {
            let runs = cmd_predict(&cfg, checkpoint.as_deref(), manifest.as_deref(), out.as_deref(), &opts)?;
            let mut code = 0;
            for r in &runs {
                println!("{} ({} rows, {} failed)", r.out.display(), r.meta.predicted, r.meta.failures.len());
                if r.partial() {
                    code = EXIT_PARTIAL;
                }
            }
            return Ok(code);
        }
        Command::Report { out, predictions, .. } => {
            let report = cmd_report(&cfg, predictions, out.as_deref(), &opts)?;
            if common.quiet {
                print!("{}", report.to_text());
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
