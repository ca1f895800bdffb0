use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use bregmangrid::scenario::{cmd_certify, cmd_equilibrium, cmd_simulate, cmd_sweep};

#[derive(Parser)]
#[command(
    name = "bregmangrid",
    version,
    about = "Equilibrium, certification and simulation for inverter-based microgrids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Network file override; defaults to the path inside the scenario.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Output directory for report files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for perturbed initial conditions.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the synchronous equilibrium and print it.
    Equilibrium(RunArgs),
    /// Solve, then run the stability certification pipeline.
    Certify(RunArgs),
    /// Integrate the closed loop and write trace.csv plus monitors.json.
    Simulate(RunArgs),
    /// Certify a linear grid of values of one scenario parameter.
    Sweep(RunArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("BREGMANGRID_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Equilibrium(a) => {
            cmd_equilibrium(&a.scenario, a.network.as_deref(), a.out.as_deref())
        }
        Command::Certify(a) => cmd_certify(&a.scenario, a.network.as_deref(), a.out.as_deref()),
        Command::Simulate(a) => {
            cmd_simulate(&a.scenario, a.network.as_deref(), a.out.as_deref(), a.seed)
        }
        Command::Sweep(a) => cmd_sweep(&a.scenario, a.network.as_deref(), a.out.as_deref()),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
