use std::path::PathBuf;
use std::process::ExitCode;

use ccgen::pipeline::{resolve_run_dir, Run, Stage};
use ccgen::{CliError, Result, RunConfig};
use clap::{Args, Parser, Subcommand};

/// Concept-based crystal generation pipeline.
#[derive(Parser)]
#[command(name = "ccgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; may set `preset = "desk"`.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set vqvae.batch_size=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory (defaults to `$CCGEN_DATA_DIR`, then `./ccgen-run`).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Discard artifacts of a run made with a different configuration.
    #[arg(long)]
    fresh: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest JSON-lines or CIF files into the run's dataset.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// `jsonl` or `cif`.
        #[arg(long, default_value = "jsonl")]
        format: String,
        #[arg(long)]
        strict: bool,
    },
    /// Build the synthetic template dataset.
    Synth(Common),
    /// Train the three-stage VQ-VAE codebook.
    TrainVqvae(Common),
    /// Encode the dataset into latent matrices and code assignments.
    Extract(Common),
    /// Train the composition generator on the latent matrices.
    TrainGen(Common),
    /// Sample a pool of compositions from the generator.
    Sample(Common),
    /// Decode the pool and keep valid, stable, unique and novel compositions.
    Filter(Common),
    /// Fine-tune the generator on its qualified samples.
    Refine(Common),
    /// Train the conditioned and unconditioned base diffusion models.
    TrainBase(Common),
    /// Generate crystals from both base models.
    Generate(Common),
    /// Score generated crystals and composition adherence.
    Evaluate(Common),
    /// Retrieve concept environments, family profiles and the symmetry classifier.
    Interpret(Common),
    /// Run every enabled stage that has not completed yet.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stop_after: Option<String>,
    },
    /// Print the resolved configuration and its digest.
    Config(Common),
}

fn load(common: &Common, extra: Vec<String>) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?),
        None => None,
    };
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(extra);
    RunConfig::resolve(text.as_deref(), &overrides)
}

fn open(common: &Common, extra: Vec<String>) -> Result<Run> {
    let config = load(common, extra)?;
    let dir = resolve_run_dir(common.run_dir.as_deref(), &config);
    Run::open(config, &dir, common.fresh)
}

fn stage(common: &Common, stage: Stage) -> Result<()> {
    let mut run = open(common, vec![])?;
    run.run_stage(stage)?;
    eprintln!("{stage}: done in {}", run.dir.display());
    Ok(())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { common, input, format, strict } => {
            let extra = vec![
                "data.source=\"ingest\"".into(),
                format!("data.input={}", toml_string(&input.to_string_lossy())),
                format!("data.format={}", toml_string(&format)),
                format!("data.strict={strict}"),
            ];
            let mut run = open(&common, extra)?;
            run.run_stage(Stage::Data)?;
            eprintln!("data: done in {}", run.dir.display());
            Ok(())
        }
        Command::Synth(c) => {
            let mut run = open(&c, vec!["data.source=\"synthetic\"".into()])?;
            run.run_stage(Stage::Data)?;
            eprintln!("data: done in {}", run.dir.display());
            Ok(())
        }
        Command::TrainVqvae(c) => stage(&c, Stage::TrainVqvae),
        Command::Extract(c) => stage(&c, Stage::Extract),
        Command::TrainGen(c) => stage(&c, Stage::TrainGen),
        Command::Sample(c) => stage(&c, Stage::Sample),
        Command::Filter(c) => stage(&c, Stage::Filter),
        Command::Refine(c) => stage(&c, Stage::Refine),
        Command::TrainBase(c) => stage(&c, Stage::TrainBase),
        Command::Generate(c) => stage(&c, Stage::Generate),
        Command::Evaluate(c) => stage(&c, Stage::Evaluate),
        Command::Interpret(c) => stage(&c, Stage::Interpret),
        Command::Pipeline { common, stop_after } => {
            let stop = stop_after.as_deref().map(str::parse::<Stage>).transpose()?;
            let mut run = open(&common, vec![])?;
            let report = run.run_pipeline(stop)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
            Ok(())
        }
        Command::Config(c) => {
            let config = load(&c, vec![])?;
            println!("# config sha256 {}\n{}", config.digest(), config.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
