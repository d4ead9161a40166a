use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use peftweave::config::ExperimentConfig;
use peftweave::peft::{ArtifactKind, Variant};
use peftweave::pipeline::{MatrixOutcome, Pipeline, PipelineOptions, COMPLETENESS_FILE, HEATMAP_FILE};
use peftweave::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INCOMPLETE: u8 = 3;

#[derive(Parser)]
#[command(name = "peftweave", version, about = "Language and task adapters and soft prompts on a tiny encoder-decoder")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "peftweave.toml")]
    config: PathBuf,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true, env = "PEFTWEAVE_OUT")]
    out: Option<PathBuf>,
    /// Parallel workers for independent cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Comma-separated seeds; overrides the configured ones.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Recompute work whose results already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the language corpora and task datasets.
    Synth,
    /// Pretrain (or load) the backbone.
    Pretrain,
    /// Train a language adapter or soft language prompt.
    TrainLang {
        #[arg(long)]
        language: String,
        /// `adapter` or `prompt`.
        #[arg(long)]
        kind: ArtifactKind,
    },
    /// Train a task artifact under one configuration.
    TrainTask {
        #[arg(long)]
        task: String,
        #[arg(long)]
        source: String,
        /// One of the six configuration names, e.g. `lang_adapter+task_adapter`.
        #[arg(long)]
        variant: Variant,
    },
    /// Train everything missing and evaluate the full transfer grid.
    Matrix,
    /// Rebuild the reports from existing evaluations.
    Report,
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::ConfigKey { .. } | Error::InvalidConfig(_))
}

fn print_outcome(pipeline: &Pipeline, outcome: &MatrixOutcome) {
    println!(
        "{} of {} cells present, {} training steps executed",
        outcome.requested - outcome.missing.len(),
        outcome.requested,
        outcome.steps_executed
    );
    for m in &outcome.missing {
        println!("absent: {m}");
    }
    let out = pipeline.output_dir();
    if let Ok(heatmap) = std::fs::read_to_string(out.join(HEATMAP_FILE)) {
        println!("relative improvement over the baseline (%):\n{heatmap}");
    }
    println!("reports in {}", out.display());
}

fn load(cli: &Cli) -> Result<Pipeline, Error> {
    let config = ExperimentConfig::load(&cli.config)?;
    Pipeline::new(
        config,
        PipelineOptions {
            output_dir: cli.out.clone(),
            seeds: cli.seeds.clone(),
            force: cli.force,
            jobs: cli.jobs,
        },
    )
}

fn run(cli: Cli, pipeline: Pipeline) -> Result<u8, Error> {
    match cli.command {
        Command::Synth => {
            for path in pipeline.synth()? {
                println!("{}", path.display());
            }
        }
        Command::Pretrain => {
            pipeline.backbone()?;
            println!("{}", pipeline.backbone_dir().display());
        }
        Command::TrainLang { language, kind } => {
            let model = pipeline.backbone()?;
            for &seed in pipeline.seeds() {
                pipeline.language(&model, &language, kind, seed)?;
                println!("{}", pipeline.language_dir(&language, kind, seed)?.display());
            }
        }
        Command::TrainTask { task, source, variant } => {
            let model = pipeline.backbone()?;
            for &seed in pipeline.seeds() {
                pipeline.task(&model, &task, &source, variant, seed)?;
                println!("{}", pipeline.task_dir(&task, &source, variant, seed)?.display());
            }
        }
        Command::Matrix | Command::Report => {
            let outcome = match cli.command {
                Command::Matrix => pipeline.matrix()?,
                _ => pipeline.report()?,
            };
            print_outcome(&pipeline, &outcome);
            if !outcome.is_complete() {
                eprintln!(
                    "grid incomplete; see {}",
                    pipeline.output_dir().join(COMPLETENESS_FILE).display()
                );
                return Ok(EXIT_INCOMPLETE);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let pipeline = match load(&cli) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(cli, pipeline) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_FAILURE })
        }
    }
}
