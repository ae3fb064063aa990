use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qising::pipeline::{
    cmd_ensemble, cmd_eval, cmd_fit, cmd_gen, cmd_simulate, cmd_train, cmd_verify, RunConfig,
};

const USAGE: u8 = 1;
const RUNTIME: u8 = 2;
const VERIFICATION: u8 = 3;

#[derive(Parser)]
#[command(name = "qising", version, about = "Dynamic Ising inference and offline RL for network treatment policies")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the network and bins.
    GenSbm,
    /// Simulate the logged panel.
    Simulate,
    /// Fit the dynamic Ising model.
    Fit,
    /// Build transitions and train the policy.
    Train,
    /// Roll out the configured policies.
    Eval,
    /// Fit posterior draws, train one agent per draw and evaluate the vote.
    Ensemble,
    /// Run the oracle and invariant suite.
    Verify {
        /// Only run these checks.
        #[arg(long, num_args = 1..)]
        only: Option<Vec<String>>,
    },
}

fn load(cli: &Cli) -> Result<RunConfig, String> {
    let path = cli.config.as_ref().ok_or("this command needs --config")?;
    let mut config = RunConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE);
        }
    }

    if let Command::Verify { only } = &cli.command {
        return match cmd_verify(cli.out.as_deref(), only.as_deref()) {
            Ok(report) => {
                for c in &report.checks {
                    println!("{} {} ({:.2}s) {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds, c.detail);
                }
                if report.checks.is_empty() {
                    eprintln!("error: no checks matched");
                    ExitCode::from(USAGE)
                } else if report.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(VERIFICATION)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(RUNTIME)
            }
        };
    }

    let config = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE);
        }
    };
    let result = match cli.command {
        Command::GenSbm => cmd_gen(&config).map(|_| ()),
        Command::Simulate => cmd_simulate(&config).map(|_| ()),
        Command::Fit => cmd_fit(&config).map(|_| ()),
        Command::Train => cmd_train(&config).map(|_| ()),
        Command::Eval => cmd_eval(&config).map(|report| {
            for p in &report.policies {
                println!("{:<16} welfare {:.4} ± {:.4}", p.policy, p.welfare_mean, p.welfare_std);
            }
        }),
        Command::Ensemble => cmd_ensemble(&config).map(|_| ()),
        Command::Verify { .. } => unreachable!("handled above"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(RUNTIME)
        }
    }
}
