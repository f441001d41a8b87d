use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tamer_core::agents::AgentKind;
use tamer_core::env::{MazeLayout, MazeObservation};
use tamer_core::harness::{self, ExperimentConfig, LearningCurve};
use tamer_live::{ServerConfig, SessionConfig};

const THRESHOLD: f64 = 0.8;

#[derive(Parser)]
#[command(name = "tamer", version, about = "Human-in-the-loop RL experiments and live training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this agent (dqn, dqn-shaping, deep-tamer, dqn-tamer).
        #[arg(long)]
        agent: Option<AgentKind>,
        /// Master seed; overrides the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute curves and run status from the files in an output directory.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Re-execute one run from its manifest and compare with the stored result.
    Replay {
        #[arg(long)]
        run_id: String,
        #[arg(long = "in", default_value = "results")]
        input: PathBuf,
    },
    /// Print a generated maze layout.
    Layout {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Serve the live training session over WebSocket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory holding the browser UI bundle.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// JSON session config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tick_ms: Option<u64>,
        #[arg(long)]
        layout_seed: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pomdp: bool,
        #[arg(long)]
        autostart: bool,
        /// Accept any session id instead of only "default".
        #[arg(long)]
        multi_session: bool,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            agent,
            seed,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(kind) = agent {
                cfg.restrict_to(kind)?;
            }
            if let Some(seed) = seed {
                cfg.master_seed = seed;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            let dir = cfg.out_dir.get_or_insert_with(|| PathBuf::from("results")).clone();
            let runs = cfg.run_specs().len();
            eprintln!("running {runs} runs of {} episodes into {}", cfg.n_episodes, dir.display());
            let results = harness::run_experiment(&cfg)?;
            print_curves(&harness::learning_curves(&results)?);
        }
        Command::Aggregate { input } => {
            let (results, curves) = harness::aggregate(&input)?;
            let expected = results.config.run_specs().len();
            let complete = results
                .config
                .run_specs()
                .iter()
                .filter(|s| results.is_complete(s))
                .count();
            println!("{complete}/{expected} runs complete");
            print_curves(&curves);
        }
        Command::Replay { run_id, input } => {
            let report = harness::replay(&input, &run_id)?;
            if report.identical {
                println!("{run_id}: identical ({} episodes)", report.replayed.len());
            } else {
                println!(
                    "{run_id}: DIFFERS from stored results at line {}",
                    report.first_difference.unwrap_or(0)
                );
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Layout { seed, json } => {
            let layout = MazeLayout::generate(seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&layout)?);
            } else {
                let env = tamer_core::env::MazeEnv::new(layout, MazeObservation::Mdp);
                println!("{}", tamer_core::env::Environment::render(&env));
            }
        }
        Command::Serve {
            addr,
            static_dir,
            config,
            tick_ms,
            layout_seed,
            seed,
            pomdp,
            autostart,
            multi_session,
        } => {
            let mut session: SessionConfig = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => SessionConfig::default(),
            };
            session.tick_ms = tick_ms.unwrap_or(session.tick_ms);
            session.layout_seed = layout_seed.unwrap_or(session.layout_seed);
            session.seed = seed.unwrap_or(session.seed);
            session.autostart |= autostart;
            if pomdp {
                session.observation = MazeObservation::Pomdp;
            }
            if let Some(dir) = &static_dir {
                if !dir.is_dir() {
                    bail!("static directory {} does not exist", dir.display());
                }
            }
            // Validate before binding so bad settings fail fast.
            tamer_live::Session::new("check", session.clone())?;
            let cfg = ServerConfig {
                session,
                static_dir,
                multi_session,
                ..ServerConfig::default()
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                tamer_live::serve(listener, cfg).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_curves(curves: &std::collections::BTreeMap<AgentKind, LearningCurve>) {
    println!("{:<12} {:>5} {:>10} {:>12}", "agent", "runs", "to_0.8", "final_mean");
    for (agent, curve) in curves {
        let reached = curve
            .episodes_to_threshold(THRESHOLD)
            .map_or_else(|| "-".to_string(), |e| e.to_string());
        let n = curve.points.len() as u64;
        let tail = curve.window_mean(n.saturating_sub(29).max(1), n).unwrap_or(f64::NAN);
        println!("{:<12} {:>5} {:>10} {:>12.4}", agent.name(), curve.runs, reached, tail);
    }
}
