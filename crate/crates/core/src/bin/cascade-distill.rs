use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cascade_distill::par;
use cascade_distill::pipeline::{ExperimentConfig, Outcome, Runner};
use cascade_distill::Result;

/// Two-stage student/teacher cascade experiments.
#[derive(Parser)]
#[command(name = "cascade-distill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train and test sets from the long-tailed mixture.
    GenData(Common),
    /// Fit the teacher network on one-hot labels.
    TrainTeacher(Common),
    /// Store teacher logits for every training example.
    CacheScores(Common),
    /// Train the student on pseudo-labels of the configured variant.
    Distill(Common),
    /// Trace the accuracy/cost curve over the delegation threshold grid.
    Sweep(Common),
    /// Train and evaluate every variant listed in report.variants.
    Report(Common),
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::TrainTeacher(c)
            | Command::CacheScores(c)
            | Command::Distill(c)
            | Command::Sweep(c)
            | Command::Report(c) => c,
        }
    }
}

fn run(command: &Command) -> Result<Outcome> {
    let common = command.common();
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    let runner = Runner::new(cfg);
    match command {
        Command::GenData(_) => runner.gen_data(),
        Command::TrainTeacher(_) => runner.train_teacher(),
        Command::CacheScores(_) => runner.cache_scores(),
        Command::Distill(_) => runner.distill(),
        Command::Sweep(_) => runner.sweep(),
        Command::Report(_) => {
            let (outcome, _) = runner.report()?;
            let table = std::fs::read_to_string(runner.paths.report_txt()).map_err(|e| {
                cascade_distill::Error::Io {
                    path: runner.paths.report_txt(),
                    source: e,
                }
            })?;
            print!("{table}");
            Ok(outcome)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match par::with_threads(par::threads_from_env(), || run(&cli.command)) {
        Ok(outcome) => {
            for note in &outcome.notes {
                eprintln!("warning: {note}");
            }
            for path in &outcome.written {
                eprintln!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
