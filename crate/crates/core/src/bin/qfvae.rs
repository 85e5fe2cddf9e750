use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qfvae::config::ExperimentConfig;
use qfvae::harness;

#[derive(Parser)]
#[command(name = "qfvae", version, about = "Quantized fine-grained VAE prosody experiments")]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test corpora.
    GenCorpus,
    /// Train the stage-1 model.
    Train {
        /// Continue from the existing stage-1 checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Fit the autoregressive prior named by sampling.prior.
    FitPrior,
    /// Draw free-running samples for test utterances.
    Sample,
    /// Reconstruct every test utterance from its posterior means.
    CopySynth,
    /// Compute metric records for sample and reconstruction sets.
    Evaluate {
        /// Sample sets to evaluate; defaults to those in the output directory.
        #[arg(long)]
        input: Vec<PathBuf>,
        /// Include c0 in mel-cepstral distortion.
        #[arg(long)]
        mcd_include_c0: bool,
    },
    /// Render report tables from metric records.
    Report {
        /// Metric files; defaults to those in the output directory.
        #[arg(long)]
        input: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> qfvae::Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::GenCorpus => harness::cmd_gen_corpus(&cfg, out),
        Command::Train { resume } => harness::cmd_train(&cfg, out, resume),
        Command::FitPrior => harness::cmd_fit_prior(&cfg, out),
        Command::Sample => harness::cmd_sample(&cfg, out),
        Command::CopySynth => harness::cmd_copy_synth(&cfg, out),
        Command::Evaluate { input, mcd_include_c0 } => harness::cmd_evaluate(&cfg, out, &input, mcd_include_c0),
        Command::Report { input } => harness::cmd_report(&cfg, out, &input),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qfvae: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
