//! `finecount` command-line driver.
//!
//! Every subcommand reads one TOML run configuration; global flags override
//! the seed, worker count and output root. Exit status is 0 on success,
//! 75 when the failure is transient (worth retrying) and 1 otherwise.

use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use finecount::experiment;
use finecount::pipeline::{self, PipelineError, RunConfig};
use finecount::synthesis::{wire, MockShapes};

#[derive(Parser)]
#[command(
    name = "finecount",
    version,
    about = "Fine-grained object counting from a category name"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Fail on any malformed dataset item instead of skipping it.
    #[arg(long, global = true)]
    strict: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate pseudo-annotated positives and hard negatives.
    Synth,
    /// Tune one concept embedding per category.
    Tune,
    /// Count every configured category in images or image directories.
    Count {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Evaluate stored concepts on a point-annotated dataset.
    Eval { dataset: PathBuf },
    /// Re-render the evaluation report, optionally with a sweep file.
    Report {
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Write procedural shape scenes as an annotated dataset.
    ToyDataset {
        dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        #[arg(long, default_value_t = 96)]
        size: u32,
    },
    /// Print the effective configuration.
    Config,
    /// Speak the generator wire protocol on stdin/stdout using the mock
    /// generator.
    #[command(hide = true)]
    ServeMockGenerator,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs.max(1);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::ServeMockGenerator = cli.command {
        let stdin = io::stdin().lock();
        return wire::serve(&MockShapes::default(), stdin, io::stdout().lock())
            .map_err(|e| anyhow!("serving generator protocol: {e}"));
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth => {
            for s in pipeline::cmd_synth(&cfg)? {
                println!(
                    "{}: {} positives, {} negatives ({}), {} failures",
                    s.category,
                    s.positives_written,
                    s.negatives_written,
                    s.negatives.join(", "),
                    s.failures
                );
            }
        }
        Command::Tune => {
            for s in pipeline::cmd_tune(&cfg)? {
                println!(
                    "{}: epoch {} (val loss {:.4}) -> {}",
                    s.category,
                    s.selected_epoch,
                    s.val_loss,
                    s.path.display()
                );
            }
        }
        Command::Count { inputs } => {
            for c in pipeline::cmd_count(&cfg, inputs)? {
                println!(
                    "{}\t{}\t{:.3}\t(raw {:.3})",
                    c.image.display(),
                    c.category,
                    c.diagnostics.specialized_count,
                    c.diagnostics.raw_count
                );
            }
        }
        Command::Eval { dataset } => {
            let report = pipeline::cmd_eval(&cfg, dataset, cli.strict)?;
            print!("{}", report.to_markdown());
        }
        Command::Report { sweep } => {
            for path in pipeline::cmd_report(&cfg, sweep.as_deref())? {
                println!("{}", path.display());
            }
        }
        Command::ToyDataset { dir, scenes, size } => {
            let scenes = experiment::test_scenes(*scenes, *size, cfg.seed);
            experiment::write_dataset(dir, &scenes)?;
            println!("{} scenes -> {}", scenes.len(), dir.display());
        }
        Command::Config => print!("{}", cfg.to_toml()),
        Command::ServeMockGenerator => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "finecount=info".into()),
        )
        .with_writer(io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Library errors already carry their causes in the message.
            eprintln!("error: {err}");
            let retriable = err
                .downcast_ref::<PipelineError>()
                .is_some_and(PipelineError::is_retriable);
            ExitCode::from(if retriable { 75 } else { 1 })
        }
    }
}
