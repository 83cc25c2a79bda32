use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scoremix::synth::SynthConfig;
use scoremix::{Error, ErrorKind, Result};

mod config;
mod pipeline;

use config::{Overrides, PipelineConfig};
use pipeline::ReportStyle;

/// Post-hoc OOD detection scores and Gaussian-mixture score ensembles.
///
/// Settings come from built-in defaults, overridden by the TOML file given
/// with --config, overridden in turn by --seed, --root and --output.
#[derive(Debug, Parser)]
#[command(name = "scoremix", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data splits and mixture fitting.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Dataset container root.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit detector statistics and the ensemble mixture.
    Fit,
    /// Write ensemble and member score dumps for one dataset.
    Score {
        #[arg(long)]
        dataset: String,
        /// Defaults to the configured ensemble.
        #[arg(long)]
        ensemble: Option<String>,
    },
    /// Run every configured DSD and ED task and write the report.
    Evaluate,
    /// Correlation matrix and greedy member selection on validation data.
    Select,
    /// Print a stored report.
    Report {
        /// Defaults to <output>/report/report.json.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportStyle::Table)]
        format: ReportStyle,
    },
    /// Write the synthetic fixture and a matching pipeline.toml.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    PipelineConfig::load(
        path,
        &Overrides {
            seed: cli.seed,
            root: cli.root.clone(),
            output: cli.output.clone(),
        },
    )
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Fit => {
            let summary = pipeline::cmd_fit(&load_config(cli)?)?;
            println!(
                "fitted {} with {} components on {} rows",
                summary.ensemble_id, summary.chosen_components, summary.train_rows
            );
        }
        Command::Score { dataset, ensemble } => {
            let dir = pipeline::cmd_score(&load_config(cli)?, dataset, ensemble.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Evaluate => {
            let cfg = load_config(cli)?;
            let report = pipeline::cmd_evaluate(&cfg)?;
            println!("{} tasks -> {}", report.tasks.len(), pipeline::report_dir(&cfg).display());
        }
        Command::Select => {
            let selection = pipeline::cmd_select(&load_config(cli)?)?;
            let names: Vec<&str> = selection.admitted.iter().map(|k| k.name()).collect();
            println!("{}", names.join(","));
        }
        Command::Report { input, format } => {
            let path = match input {
                Some(p) => p.clone(),
                None => pipeline::report_dir(&load_config(cli)?).join("report.json"),
            };
            print!("{}", pipeline::cmd_report(&path, *format)?);
        }
        Command::Synth { out } => {
            let mut synth = SynthConfig::default();
            if let Some(seed) = cli.seed {
                synth.seed = seed;
            }
            println!("{}", pipeline::cmd_synth(out, &synth)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
