use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latinf_core::config::RunConfig;
use latinf_core::pipeline::{Command, Pipeline, with_workers};
use latinf_core::Error;

/// Latent-feature influence attribution pipeline.
#[derive(Parser, Debug)]
#[command(name = "latinf", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (all cores by default).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Generate or load data and train the model.
    Train,
    /// Train a TopK SAE on the frozen model's split-layer activations.
    SaeTrain,
    /// Prefilter, solve the iHVP and write one IFR per test example.
    Influence,
    /// Remove/keep top-k masking curves for each ranking method.
    EvalMask,
    /// Pairwise orthogonality statistics in text, pre-latent and SAE space.
    Ortho,
    /// Token heatmaps for each test example and its top training example.
    Heatmap,
    /// Per-stage timings of the derivative swap against the forward sweep.
    Bench,
    /// Run the numerical oracle checks.
    Selftest,
    /// Print the resolved configuration as TOML.
    PrintConfig,
}

fn resolve(cli: &Cli) -> latinf_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok());
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.outputs = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage(cmd: Cmd) -> Option<Command> {
    Some(match cmd {
        Cmd::Train => Command::Train,
        Cmd::SaeTrain => Command::SaeTrain,
        Cmd::Influence => Command::Influence,
        Cmd::EvalMask => Command::EvalMask,
        Cmd::Ortho => Command::Ortho,
        Cmd::Heatmap => Command::Heatmap,
        Cmd::Bench => Command::Bench,
        Cmd::Selftest => Command::Selftest,
        Cmd::PrintConfig => return None,
    })
}

fn run(cli: &Cli) -> latinf_core::Result<()> {
    let cfg = resolve(cli)?;
    let Some(cmd) = stage(cli.command) else {
        print!("{}", cfg.to_toml());
        return Ok(());
    };
    let pipeline = Pipeline::new(cfg)?;
    let manifest = with_workers(cli.workers, || pipeline.run(cmd))??;
    for line in &manifest.summary {
        println!("{line}");
    }
    println!("manifest: {}", pipeline.layout().manifest(cmd).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
