use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmfs::pipeline::{self, ExperimentConfig, GridConfig};
use mmfs::{Error, Result};

#[derive(Parser)]
#[command(name = "mmfs", about = "Few-shot spoken-word to image matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load data, write split manifests, train background classifiers.
    Prepare(Opts),
    /// Mine cross-modal pairs, positives and pivot classes.
    Mine(Opts),
    /// Train every grid cell of every model the arms need.
    Train(Opts),
    /// Run all arms on the shared episodes and write the report.
    Evaluate(Opts),
    /// Rewrite the report from stored evaluation results.
    Report(Opts),
    /// prepare, mine, train and evaluate in one go.
    Run(Opts),
}

#[derive(Args)]
struct Opts {
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the arm list; repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    arm: Vec<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the grid as `batch,sizes:seeds`, e.g. `16,32:0,1`.
    #[arg(long)]
    grid: Option<String>,
}

impl Opts {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if !self.arm.is_empty() {
            cfg.arms = self.arm.clone();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(grid) = &self.grid {
            cfg.grid = GridConfig::parse(grid)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(o) => pipeline::prepare(&o.config()?),
        Command::Mine(o) => pipeline::mine(&o.config()?),
        Command::Train(o) => pipeline::train(&o.config()?),
        Command::Evaluate(o) => {
            let cfg = o.config()?;
            let summary = pipeline::evaluate(&cfg)?;
            print!("{}", mmfs::eval::format_table(&summary));
            Ok(())
        }
        Command::Report(o) => {
            let summary = pipeline::report(&o.config()?)?;
            print!("{}", mmfs::eval::format_table(&summary));
            Ok(())
        }
        Command::Run(o) => {
            let summary = pipeline::run(&o.config()?)?;
            print!("{}", mmfs::eval::format_table(&summary));
            Ok(())
        }
    }
}

fn error_line(e: &Error) -> String {
    let mut line = format!("error kind={}", e.kind());
    if let Error::Config { field, .. } = e {
        line.push_str(&format!(" field={field}"));
    }
    let message = e.to_string().replace('\n', " ");
    line.push_str(&format!(" message={}", serde_json::to_string(&message).expect("string serializes")));
    line
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
