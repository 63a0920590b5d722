use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use rlqe::harness::{self, run_method, ExperimentConfig, Method};
use rlqe::io::{episode_from_json, episode_to_json, read_episode_binary, write_episode_binary};
use rlqe::kalman::smoother;
use rlqe::lds::{apply_corruptions, simulate, AdversaryStrategy, EpisodeData};
use rlqe::linalg::Trajectory;
use rlqe::{Result, RlqeError};

/// Robust state estimation experiments.
#[derive(Parser)]
#[command(name = "rlqe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config; writes results.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Simulate one corrupted episode from a config's scenario.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        eta: f64,
        #[arg(long)]
        horizon: usize,
        /// Trial counter; the seed is the master seed plus this.
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// `.bin` writes the binary format, anything else JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trajectory (JSON rows) against an episode.
    Score {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
    },
    /// Oracle smoother that knows the corruption mask.
    Oracle {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one estimator on an episode.
    Estimate {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: String,
        /// Assumed corruption fraction.
        #[arg(long)]
        eta: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?;
    if let Ok(s) = std::env::var("RLQE_SEED") {
        cfg.master_seed = s
            .trim()
            .parse()
            .map_err(|_| RlqeError::InvalidInput(format!("RLQE_SEED must be an unsigned integer, got {s:?}")))?;
        log::info!("master seed overridden to {}", cfg.master_seed);
    }
    Ok(cfg)
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn load_episode(path: &Path) -> Result<EpisodeData> {
    if is_binary(path) {
        read_episode_binary(BufReader::new(File::open(path)?))
    } else {
        episode_from_json(&std::fs::read_to_string(path)?)
    }
}

fn save_episode(ep: &EpisodeData, path: &Path) -> Result<()> {
    if is_binary(path) {
        write_episode_binary(ep, BufWriter::new(File::create(path)?))
    } else {
        Ok(std::fs::write(path, episode_to_json(ep)?)?)
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

#[derive(Serialize)]
struct Score {
    nll: f64,
    opt: f64,
    excess_risk: f64,
}

fn parse_method(name: &str) -> Result<Method> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| RlqeError::InvalidInput(format!("unknown method {name:?}")))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, out, workers } => {
            let cfg = load_config(&config)?;
            let dir = out
                .or_else(|| cfg.output.as_ref().map(PathBuf::from))
                .ok_or_else(|| RlqeError::InvalidInput("no --out and no output in config".into()))?;
            let rows = harness::run(&cfg, workers)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            harness::write_outputs(&rows, &dir)?;
            eprintln!("{} rows ({failed} failed) written to {}", rows.len(), dir.display());
            Ok(())
        }
        Command::Simulate {
            config,
            eta,
            horizon,
            trial,
            out,
        } => {
            let cfg = load_config(&config)?;
            let seed = harness::trial_seed(cfg.master_seed, trial);
            let clean = simulate(&cfg.model(horizon)?, seed)?;
            let ep = apply_corruptions(&clean, eta, &AdversaryStrategy::from(&cfg.adversary(horizon)), seed)?;
            save_episode(&ep, &out)
        }
        Command::Score { episode, estimate } => {
            let ep = load_episode(&episode)?;
            let x: Trajectory = serde_json::from_str(&std::fs::read_to_string(estimate)?)?;
            let (nll, opt) = harness::score_trajectory(&x, &ep)?;
            print_json(&Score {
                nll,
                opt,
                excess_risk: nll - opt,
            })
        }
        Command::Oracle { episode, out } => {
            let ep = load_episode(&episode)?;
            let sol = smoother(&ep.model, &ep.y, &ep.a_star)?;
            if let Some(out) = out {
                std::fs::write(out, serde_json::to_string(&sol.x_hat)?)?;
            }
            print_json(&serde_json::json!({ "opt": sol.objective }))
        }
        Command::Estimate {
            episode,
            config,
            method,
            eta,
            out,
        } => {
            let ep = load_episode(&episode)?;
            let cfg = load_config(&config)?;
            let m = parse_method(&method)?;
            let res = run_method(m, &ep, &cfg.settings(eta))?;
            let x = res
                .x_hat
                .or(res.predictions)
                .ok_or_else(|| RlqeError::InvalidInput("method produced no trajectory".into()))?;
            std::fs::write(out, serde_json::to_string(&x)?)?;
            for f in res.flags {
                eprintln!("flag: {f}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
