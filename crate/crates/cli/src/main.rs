use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lpvsync_cli::commands::{self, ChaosOptions, CliError};
use lpvsync_cli::config::RunConfig;

#[derive(Parser)]
/// Output goes to `--out`, else the config's output dir, else
/// `$LPVSYNC_OUT/<command>`.
#[command(name = "lpvsync", version)]
struct Cli {
    /// Worker threads for parallel grid solves (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a gain schedule and write its archive and report.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the closed loop with an archived schedule.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the disturbance seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Re-check an archived schedule.
    Verify {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Bound on |rho'| to compare with the schedule's rate bound.
        #[arg(long)]
        rho_rate: Option<f64>,
    },
    /// Master-slave chaotic oscillator example end to end.
    ExampleChaos {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0])]
        theta: Vec<f64>,
        /// Measurement draw seed (the bundled draw uses 42).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig, CliError> {
    Ok(RunConfig::load(path)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Other(e.into()))?;
    }
    match cli.command {
        Command::Synthesize { config, out } => {
            let cfg = load(&config)?;
            let out = commands::resolve_out(out.as_deref(), Some(&cfg), "synthesize");
            commands::cmd_synthesize(&cfg, &out)?;
        }
        Command::Simulate {
            config,
            schedule,
            out,
            seed,
            dt,
            horizon,
        } => {
            let mut cfg = load(&config)?;
            if let Some(sim) = cfg.simulation.as_mut() {
                if let Some(dt) = dt {
                    sim.dt = dt;
                }
                if let Some(h) = horizon {
                    sim.horizon = h;
                }
            }
            let out = commands::resolve_out(out.as_deref(), Some(&cfg), "simulate");
            commands::cmd_simulate(&cfg, &schedule, &out, seed)?;
        }
        Command::Verify {
            schedule,
            out,
            rho_rate,
        } => {
            commands::cmd_verify(&schedule, out.as_deref(), rho_rate)?;
        }
        Command::ExampleChaos {
            theta,
            seed,
            horizon,
            dt,
            out,
        } => {
            let out = commands::resolve_out(out.as_deref(), None, "example-chaos");
            commands::cmd_example_chaos(
                &ChaosOptions {
                    thetas: theta,
                    seed,
                    horizon,
                    dt,
                },
                &out,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
