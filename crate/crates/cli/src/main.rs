use std::path::PathBuf;
use std::process::ExitCode;

use bttf_lab::commands::{self, ExplainArgs, TrainArgs};
use bttf_lab::config::load_config;
use bttf_lab::suite::{reproduce_orderings, SuiteConfig};
use bttf_lab::{exit, resolve_jobs, CliError, CliResult};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bttf-lab", version, about = "Counterfactual video explanations by latent optimization, at desk scale")]
struct Cli {
    /// Worker threads for per-sample work (BTTF_LAB_THREADS takes precedence).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the Shape-Moving dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config field, e.g. `--set speed=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier, codec, or denoiser.
    Train {
        /// classifier | codec | denoiser
        component: String,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from the existing checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Produce a counterfactual for one video.
    Explain {
        /// bttf | pgd | cg-frame | cg-video-mid | cg-video
        #[arg(long)]
        method: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare counterfactuals against originals.
    Evaluate {
        #[arg(long)]
        originals: PathBuf,
        #[arg(long)]
        counterfactuals: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train everything, run all methods and ablations, and check the orderings.
    ReproduceOrderings {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = resolve_jobs(cli.jobs) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {n} worker threads: {e}")))?;
    }
    match cli.command {
        Command::GenData { config, overrides, out } => commands::gen_data(config.as_deref(), &overrides, &out),
        Command::Train { component, data, out, config, overrides, resume } => commands::train(TrainArgs {
            component: component.parse()?,
            data: &data,
            out: &out,
            config: config.as_deref(),
            overrides: &overrides,
            resume,
        }),
        Command::Explain { method, input, target, checkpoints, config, overrides, out } => commands::explain(ExplainArgs {
            method: &method,
            input: &input,
            target,
            checkpoints: &checkpoints,
            config: config.as_deref(),
            overrides: &overrides,
            out: &out,
        }),
        Command::Evaluate { originals, counterfactuals, checkpoints, out } => {
            commands::evaluate_lists(&originals, &counterfactuals, &checkpoints, &out)
        }
        Command::ReproduceOrderings { config, overrides, out } => {
            let cfg: SuiteConfig = load_config(config.as_deref(), &overrides)?;
            let o = reproduce_orderings(&cfg, &out)?;
            for (name, ok) in &o.checks {
                println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
