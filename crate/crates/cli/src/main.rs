use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gossip_core::commands::{
    cmd_analyze, cmd_check, cmd_montecarlo, cmd_run, exit_code, render_comparison, render_run, EXIT_FAILURE, EXIT_OK,
    EXIT_USAGE,
};
use gossip_core::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "gossip-sa", version, about = "Distributed stochastic approximation over random gossip networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces `run.seed`.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Contraction, Hurwitz and step-size assumptions.
    Check(Common),
    /// Limit point and asymptotic covariance report.
    Analyze(Common),
    /// A single trajectory.
    Run(Common),
    /// Repeated runs compared against the asymptotic covariance.
    Montecarlo(Common),
}

fn load(common: &Common) -> gossip_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed_override {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(command: &Command) -> gossip_core::Result<i32> {
    let (common, out): (&Common, Option<&Path>) = match command {
        Command::Check(c) | Command::Analyze(c) | Command::Run(c) | Command::Montecarlo(c) => (c, c.out.as_deref()),
    };
    let cfg = load(common)?;
    match command {
        Command::Check(_) => {
            let outcome = cmd_check(&cfg)?;
            println!("{}", outcome.render());
            Ok(if outcome.passed() { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Analyze(_) => {
            let report = cmd_analyze(&cfg, out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(EXIT_OK)
        }
        Command::Run(_) => {
            let record = cmd_run(&cfg, out)?;
            println!("{}", render_run(&record));
            Ok(EXIT_OK)
        }
        Command::Montecarlo(_) => {
            let (_, cmp) = cmd_montecarlo(&cfg, out)?;
            println!("{}", render_comparison(&cmp));
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
