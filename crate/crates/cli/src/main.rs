use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spkver_cli::commands::{self, EvalArgs, SweepArgs};
use spkver_cli::config::parse_list;

/// Text-dependent speaker verification: features, training, enrollment and
/// evaluation.
#[derive(Parser)]
#[command(name = "spkver", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Log-filterbank features for every WAV under a directory.
    Extract {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with manifests and a trial list.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; writes model.svm and train_log.tsv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint whose network initializes training.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Build one speaker model per speaker in the manifest.
    Enroll {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list; writes scores.tsv and summary.txt.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Directory of enrolled speaker models.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Manifest of the test utterances.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tnorm: bool,
        /// Directory of impostor speaker models for t-norm.
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Write (FAR, FRR) operating points here.
        #[arg(long)]
        det_out: Option<PathBuf>,
    },
    /// EER for each training speaker-model size.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        enroll: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Comma-separated sizes, e.g. 1,3,5.
        #[arg(long)]
        sizes: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Extract { input, out, config } => commands::extract(&input, &out, config.as_deref()),
        Command::Synth { config, seed, out } => commands::synth(config.as_deref(), seed, &out),
        Command::Train { config, seed, manifest, out, init } => {
            commands::train_cmd(config.as_deref(), seed, &manifest, &out, init.as_deref())
        }
        Command::Enroll { config, model, manifest, out } => commands::enroll_cmd(config.as_deref(), &model, &manifest, &out),
        Command::Eval { model, models, trials, manifest, out, tnorm, cohort, det_out } => {
            let summary = commands::eval_cmd(&EvalArgs {
                model: &model,
                models: &models,
                trials: &trials,
                manifest: &manifest,
                out: &out,
                tnorm,
                cohort: cohort.as_deref(),
                det_out: det_out.as_deref(),
            })?;
            print!("{summary}");
            Ok(())
        }
        Command::Sweep { config, seed, manifest, enroll, test, trials, sizes, out, init } => {
            let sizes = parse_list("sizes", &sizes)?;
            commands::sweep_cmd(&SweepArgs {
                config: config.as_deref(),
                seed,
                manifest: &manifest,
                enroll: &enroll,
                test: &test,
                trials: &trials,
                sizes: &sizes,
                out: &out,
                init: init.as_deref(),
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
