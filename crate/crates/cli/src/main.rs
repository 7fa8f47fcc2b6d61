//! `facet` — train, personalize, and probe a compact conditional diffusion
//! engine over synthetic concept sets.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 training divergence,
//! 4 missing artifact, 5 failed verification, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use facet_core::error::Error;

#[derive(Parser)]
#[command(
    name = "facet",
    version,
    about = "Concept tokens and low-rank adapters on a compact conditional diffusion engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; every field is optional, defaults apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; all stage-level randomness is derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for checkpoints, logs, reports, and the run manifest.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Deliberately corrupt the closed-form coefficient (failure-path hook).
    #[arg(long, hide = true)]
    inject_bad_coefficient: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base engine on a synthetic corpus and save `model.ckpt`.
    Pretrain(CommonArgs),
    /// Optimize concept tokens against the frozen engine (`tokens.ckpt`).
    Optimize(CommonArgs),
    /// Fit low-rank adapters under the frozen tokens (`adapted.ckpt`).
    Finetune(CommonArgs),
    /// Generate under the tuned tokens and write `samples.json`.
    Sample(CommonArgs),
    /// Score fidelity, alignment, and residual leakage (`probe_report.json`).
    Eval(CommonArgs),
    /// Sweep token-stage knobs and write `sweep.csv`.
    Ablate(CommonArgs),
    /// Check the reverse-step KL identities numerically.
    VerifyDerivation(VerifyArgs),
}

fn run(cli: Cli) -> facet_core::error::Result<()> {
    match cli.command {
        Command::Pretrain(a) => {
            let cfg = commands::resolve_config(a.config.as_ref())?;
            commands::cmd_pretrain(&cfg, a.seed, &a.out)
        }
        Command::Optimize(a) => {
            let cfg = commands::resolve_config(a.config.as_ref())?;
            commands::cmd_optimize(&cfg, a.seed, &a.out)
        }
        Command::Finetune(a) => {
            let cfg = commands::resolve_config(a.config.as_ref())?;
            commands::cmd_finetune(&cfg, a.seed, &a.out)
        }
        Command::Sample(a) => {
            let cfg = commands::resolve_config(a.config.as_ref())?;
            commands::cmd_sample(&cfg, a.seed, &a.out)
        }
        Command::Eval(a) => {
            let cfg = commands::resolve_config(a.config.as_ref())?;
            commands::cmd_eval(&cfg, a.seed, &a.out)
        }
        Command::Ablate(a) => {
            let cfg = commands::resolve_config(a.config.as_ref())?;
            commands::cmd_ablate(&cfg, a.seed, &a.out)
        }
        Command::VerifyDerivation(a) => {
            let cfg = commands::resolve_config(a.common.config.as_ref())?;
            commands::cmd_verify_derivation(
                &cfg,
                a.common.seed,
                &a.common.out,
                a.inject_bad_coefficient,
            )
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Diverged { .. } => 3,
        Error::MissingArtifact(_) => 4,
        Error::Verification(_) => 5,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
