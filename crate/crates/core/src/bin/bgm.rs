use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use bgm::harness::artifacts::Runner;
use bgm::harness::{ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "bgm", version, about = "Bridge passage selection experiments")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Overrides the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to <out>/data.
    GenerateData,
    /// Retrieve top-k candidates for every example.
    Retrieve,
    /// Build silver passage sequences.
    SynthSps,
    /// Supervised training on silver sequences.
    TrainSl,
    /// Reinforcement-learning fine-tuning of the supervised checkpoint.
    TrainRl,
    /// Score the configured systems and merge rows into results.csv.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Permutation sensitivity of full lists versus first picks.
    GapExperiment,
    /// Render results.csv into report.md.
    Report,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    let runner = Runner::new(cfg.clone(), cfg.out.clone());

    match cli.command {
        Command::GenerateData => {
            let ds = runner.generate_data()?;
            println!("{} examples -> {}", ds.examples.len(), runner.dir.data_dir().display());
        }
        Command::Retrieve => {
            runner.retrieve()?;
            println!("{}", runner.dir.retrieved_path().display());
        }
        Command::SynthSps => {
            let exp = runner.experiment()?;
            let ev = exp.backend()?;
            let records = runner.synth_sps(&exp, &ev)?;
            let nonempty = records.iter().filter(|r| !r.sps.is_empty()).count();
            println!(
                "{} silver sequences ({nonempty} non-empty) -> {}",
                records.len(),
                runner.dir.sps_path().display()
            );
        }
        Command::TrainSl => {
            let exp = runner.experiment()?;
            let ev = exp.backend()?;
            runner.train_sl(&exp, &ev)?;
            println!("{}", runner.dir.checkpoint_path("sl", seed).display());
        }
        Command::TrainRl => {
            let exp = runner.experiment()?;
            let ev = exp.backend()?;
            runner.train_rl(&exp, &ev)?;
            println!("{}", runner.dir.checkpoint_path("rl", seed).display());
        }
        Command::Eval { split } => {
            let exp = runner.experiment()?;
            let ev = exp.backend()?;
            let table = runner.eval(&exp, &ev, &split)?;
            print!("{}", table.to_markdown());
        }
        Command::GapExperiment => {
            let exp = runner.experiment()?;
            let ev = exp.backend()?;
            let report = runner.gap_experiment(&exp, &ev)?;
            print!("{}", report.to_markdown());
        }
        Command::Report => {
            print!("{}", runner.report()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
