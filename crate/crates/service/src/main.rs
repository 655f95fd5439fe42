use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use parley::scenario::{self, Policy, Script};
use parley::server::{self, Pacing};
use parley_core::decision::ExecutionLog;
use parley_core::world::{load_config, Config};

#[derive(Parser)]
#[command(name = "parley", version, about = "Simulated manipulator that negotiates infeasible tasks with its operator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the live loop and accept WebSocket clients on /ws.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Tick as fast as possible instead of at wall-clock rate.
        #[arg(long)]
        unpaced: bool,
    },
    /// Headless scripted run under one operator policy.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, value_enum)]
        policy: Policy,
        /// Report file (JSON). The execution log goes next to it as `.log.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both policies on the same script and report the comparison.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute job metrics from a saved execution log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 1.5)]
        kappa: f64,
    },
    /// Validate a configuration file.
    CheckConfig { path: PathBuf },
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn config(path: &Path) -> Result<Config, String> {
    load_config(&read(path)?).map_err(|e| format!("{}: {}", path.display(), e.to_json()))
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Serve { config: path, listen, unpaced } => {
            let cfg = config(&path)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(async {
                let pacing = if unpaced { Pacing::Unpaced } else { Pacing::WallClock };
                let srv = server::start(&cfg, listen, pacing).await.map_err(|e| format!("{listen}: {e}"))?;
                eprintln!("listening on ws://{}/ws", srv.addr);
                srv.wait().await;
                Ok(())
            })
        }
        Command::Run { config: path, script, policy, out } => {
            let cfg = config(&path)?;
            let script = Script::parse(&read(&script)?).map_err(|e| e.to_string())?;
            let result = scenario::run_scenario(&cfg, &script, policy).map_err(|e| e.to_string())?;
            write(&out, &result.report.to_json())?;
            write(&out.with_extension("log.jsonl"), &result.log.to_jsonl())?;
            print!("{}", result.report.table());
            Ok(())
        }
        Command::Compare { config: path, script, out } => {
            let cfg = config(&path)?;
            let script = Script::parse(&read(&script)?).map_err(|e| e.to_string())?;
            let cmp = scenario::compare(&cfg, &script).map_err(|e| e.to_string())?;
            if let Some(out) = out {
                write(&out, &serde_json::to_string_pretty(&cmp).expect("reports serialize"))?;
            }
            print!("{}", cmp.table());
            Ok(())
        }
        Command::Replay { log, kappa } => {
            let log = ExecutionLog::from_jsonl(&read(&log)?).map_err(|e| format!("{}: {e}", log.display()))?;
            let m = scenario::replay(&log, kappa);
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
            Ok(())
        }
        Command::CheckConfig { path } => {
            let cfg = config(&path)?;
            println!(
                "{}: ok ({} joints, {} stations, {} obstacles, {} job steps)",
                path.display(),
                cfg.robot.dof(),
                cfg.scene.stations.len(),
                cfg.scene.obstacles.len(),
                cfg.job.steps.len()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
