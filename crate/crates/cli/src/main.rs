//! `physcon`: data generation, training, inference, rollouts,
//! counterfactual edits, probes and self-checks over one config file.

mod check;
mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use physcon::trainer::Ablation;

use crate::check::Suite;
use crate::commands::{EpisodeArgs, Global, Metric, ProbeArgs, TrainArgs};
use crate::config::Overrides;
use crate::error::{CliError, EXIT_USAGE};
use crate::output::ImageFormat;

#[derive(Parser)]
#[command(name = "physcon", version, about = "Object-centric latent physics: data, training and probes")]
struct Cli {
    /// TOML run configuration; sections scene, model, inference, train, eval.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override; beats PHYCINE_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Image format for frames and strips.
    #[arg(long, global = true, value_enum, default_value_t = ImageFormat::Ppm)]
    format: ImageFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a categorized episode container and its JSON manifest.
    GenData {
        /// Episodes per category 1..5, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged training schedule.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, metrics.jsonl and run.toml.
        #[arg(long)]
        out: PathBuf,
        /// Train only the stages up to and including this one.
        #[arg(long)]
        stage: Option<u8>,
        /// Continue from a checkpoint with its own configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// full, no-b2u or no-interaction.
        #[arg(long)]
        ablation: Option<String>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Infer latents for one episode and write reconstructions.
    Infer {
        #[command(flatten)]
        ep: EpisodeOpts,
    },
    /// Infer on the observed frames, then roll out and decode.
    Rollout {
        #[command(flatten)]
        ep: EpisodeOpts,
        /// Last frame index of the rollout.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Roll out an edited copy of the inferred latents beside the original.
    ///
    /// Edits: identity | charge:slot=S:flip | charge:slot=S:set=V |
    /// mass:slot=S:scale=F | dyn:slot=S:dim=D:set=V
    Counterfactual {
        #[command(flatten)]
        ep: EpisodeOpts,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        edit: String,
    },
    /// Latent probes and the ablation table.
    Probe {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Ablation arm as name=checkpoint; repeatable.
        #[arg(long = "arm")]
        arms: Vec<String>,
        /// JSON report (CSV for the ablation table).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient, conservation and invariance self-checks.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Random cases per suite.
        #[arg(long, default_value_t = 5)]
        cases: usize,
    },
}

#[derive(clap::Args)]
struct EpisodeOpts {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    /// Observed horizon; inference sees this many frames plus one.
    #[arg(long)]
    observe: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

impl EpisodeOpts {
    fn args(&self) -> EpisodeArgs<'_> {
        EpisodeArgs {
            ckpt: &self.ckpt,
            data: &self.data,
            episode: self.episode,
            observe: self.observe,
            out: &self.out,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = Global {
        config: cli.config,
        overrides: Overrides {
            seed: cli.seed,
            threads: cli.threads,
        },
        format: cli.format,
    };
    match cli.command {
        Command::GenData { counts, out } => commands::gen_data(&g, &counts, &out),
        Command::Train {
            data,
            out,
            stage,
            resume,
            ablation,
            max_steps,
        } => {
            let ablation = ablation.map(|a| a.parse::<Ablation>()).transpose()?;
            commands::train(
                &g,
                &TrainArgs {
                    data: &data,
                    out: &out,
                    stage,
                    resume: resume.as_deref(),
                    ablation,
                    max_steps,
                },
            )
        }
        Command::Infer { ep } => commands::infer(&g, &ep.args()),
        Command::Rollout { ep, steps } => commands::rollout(&g, &ep.args(), steps),
        Command::Counterfactual { ep, steps, edit } => commands::counterfactual_cmd(&g, &ep.args(), steps, &edit),
        Command::Probe {
            metric,
            data,
            ckpt,
            arms,
            out,
        } => commands::probe(
            &g,
            &ProbeArgs {
                metric,
                data: &data,
                ckpt: ckpt.as_deref(),
                arms: &arms,
                out: out.as_deref(),
            },
        ),
        Command::Check { suite, cases } => commands::check_cmd(&g, suite, cases),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            // help and version go to stdout
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
