//! `surelock`: run the locking sampler, sweep its parameters and check the error bound.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when an invariant
//! is violated during a run, 1 for anything else (I/O and the like).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use surelock::Error;

use crate::commands::{ConstantsArgs, SimulateArgs};
use crate::config::ConfigFlags;

#[derive(Debug, Parser)]
#[command(name = "surelock", version, about = "KL-gated position locking for masked-diffusion sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the sampler once and write trace, tokens and summary files.
    Run {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Run every point of an ε / m / S / N_gen / seed grid and write one CSV row per point.
    Sweep {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Check the terminal-error bound on a stored logits trace or a fresh baseline run.
    VerifyBound {
        #[command(flatten)]
        flags: ConfigFlags,
        /// `logits.jsonl` written by `run --write-logits`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Lipschitz constant of log-softmax.
        #[arg(long, default_value_t = 2.0)]
        l_sm: f64,
    },
    /// Check the bound on synthetic geometrically contracting trajectories.
    Simulate {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Steps per trajectory.
        #[arg(long = "traj-steps", default_value_t = 40)]
        traj_steps: usize,
        #[arg(long, default_value_t = 2.0)]
        magnitude: f64,
    },
    /// Report the Lipschitz constants of the model.
    Constants {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Input radius R_x; calibrated from a forward pass when absent.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        kappa: f64,
        /// Random pairs per empirical Lipschitz estimate.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long)]
        d_k: Option<usize>,
    },
    /// Check that the GEMM counter equals the FLOPs formula on every step.
    FlopsCheck {
        #[command(flatten)]
        flags: ConfigFlags,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { flags } => commands::run(&flags.resolve()?),
        Command::Sweep { flags } => commands::sweep(&flags.resolve()?),
        Command::VerifyBound { flags, trace, l_sm } => commands::verify_bound(&flags.resolve()?, trace, l_sm),
        Command::Simulate {
            flags,
            count,
            traj_steps,
            magnitude,
        } => {
            let cfg = flags.resolve()?;
            let args = SimulateArgs {
                count,
                steps: traj_steps,
                magnitude,
                seed: cfg.run.seed,
            };
            commands::simulate(&cfg, &args)
        }
        Command::Constants {
            flags,
            radius,
            kappa,
            samples,
            d_k,
        } => commands::constants(
            &flags.resolve()?,
            &ConstantsArgs {
                radius,
                kappa,
                samples,
                d_k,
            },
        ),
        Command::FlopsCheck { flags } => commands::flops_check(&flags.resolve()?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_invariant_violation() => 3,
        Some(Error::InvalidConfig(_) | Error::InvalidInput(_) | Error::WeightFile(_) | Error::Json(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
