mod commands;
mod failure;
mod system;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Output, ShadowArgs};
use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "ddelab", version, about = "Exponential dichotomy and shadowing experiments for linear delay equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// System description (JSON, schema "v1").
    #[arg(long, global = true, value_name = "FILE")]
    system: Option<PathBuf>,

    /// Built-in system: delay-stable, delay-unstable, saddle, zero, ode-decay, remark2.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "ddelab-out")]
    out: PathBuf,

    /// Seed for random forcings.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Dotted-path override of the system file, e.g. grid.n=32.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the initial value problem and write the trajectory.
    Integrate {
        /// Constant initial segment (one value or d comma-separated values).
        #[arg(long, value_delimiter = ',', default_value = "1")]
        phi: Vec<f64>,
        #[arg(long, default_value_t = 5.0)]
        t_end: f64,
    },
    /// Lyapunov exponents, splitting, envelope constants and verdict.
    Dichotomy,
    /// Shadow a pseudo-solution by a true solution.
    Shadow {
        /// Pseudo-solution CSV (t, x1.., dx1..) covering [-r, horizon].
        #[arg(long, value_name = "FILE")]
        pseudo: Option<PathBuf>,
        /// Initial segment of the generated pseudo-solution.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        phi: Vec<f64>,
        /// Perturbation amplitude of the generated pseudo-solution.
        #[arg(long, default_value_t = 1e-3)]
        perturb: f64,
        /// Comma-separated perturbation amplitudes; writes the kappa table.
        #[arg(long, value_delimiter = ',', conflicts_with = "pseudo")]
        delta_sweep: Option<Vec<f64>>,
        /// Target shadow distance.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Drop the anticausal part of the correction (control run).
        #[arg(long)]
        ablate: bool,
    },
    /// Run the unbounded-coefficient counterexample checks.
    Counterexample {
        #[arg(long, default_value_t = 10)]
        n_max: usize,
    },
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("DDELAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::schema(format!("DDELAB_THREADS: expected a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new("threads", e.to_string(), 1))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let c = &cli.common;
    let out = Output::new(&c.out)?;
    let load = || system::load(c.system.as_deref(), c.preset.as_deref(), &c.overrides);
    match &cli.command {
        Command::Integrate { phi, t_end } => commands::integrate(&load()?, phi, *t_end, &out),
        Command::Dichotomy => commands::dichotomy(&load()?, &out),
        Command::Shadow { pseudo, phi, perturb, delta_sweep, epsilon, ablate } => {
            let args = ShadowArgs {
                phi,
                pseudo: pseudo.as_deref(),
                perturb: *perturb,
                delta_sweep: delta_sweep.as_deref(),
                epsilon: *epsilon,
                ablate: *ablate,
            };
            commands::shadow_cmd(&load()?, &args, &out)
        }
        Command::Counterexample { n_max } => commands::counterexample(*n_max, c.seed, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code)
        }
    }
}
