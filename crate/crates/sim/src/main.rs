use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ursula_core::harness::{run_scenario_with, HarnessError};
use ursula_core::replay::{query, ReplayLog};
use ursula_core::scenario::{Scenario, ScenarioError};
use ursula_sim::server::{serve, ServeOptions};

const VALIDATION: u8 = 2;
const RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "sim", version, about = "Deterministic digital twin of a squid-inspired underwater robot")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario headless, or live behind the operator server.
    Run {
        scenario: PathBuf,
        /// Serve /ws, /health and /scenario on this address and pace the loop to wall-clock.
        #[arg(long, value_name = "HOST:PORT")]
        serve: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario duration, s.
        #[arg(long)]
        duration: Option<f64>,
        /// Write the replay log (JSON lines).
        #[arg(long, value_name = "OUT.JSONL")]
        log: Option<PathBuf>,
        /// Live mode only: simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Extract columns from a replay log as CSV.
    Replay {
        log: PathBuf,
        /// Comma-separated field names.
        #[arg(long, value_delimiter = ',', required = true)]
        query: Vec<String>,
        /// Output file; stdout when omitted.
        #[arg(long, value_name = "OUT.CSV")]
        csv: Option<PathBuf>,
    },
    /// Check a scenario file and list every violation.
    Validate { scenario: PathBuf },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let lines: Vec<String> = e.violations().iter().map(|v| format!("{}: {}", v.path, v.message)).collect();
        Failure::Validation(lines.join("\n"))
    }
}

fn load(path: &PathBuf) -> Result<Scenario, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|x| x == "json");
    Ok(if is_json { Scenario::from_json(&text)? } else { Scenario::from_toml(&text)? })
}

fn override_and_check(sc: &mut Scenario, seed: Option<u64>, duration: Option<f64>) -> Result<(), Failure> {
    if let Some(s) = seed {
        sc.seed = s;
    }
    if let Some(d) = duration {
        sc.duration = d;
    }
    sc.validate()?;
    Ok(())
}

fn run_headless(sc: Scenario, log: Option<PathBuf>) -> Result<(), Failure> {
    let mut out = match &log {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?,
        )),
        None => None,
    };
    let result = run_scenario_with(sc, |record| {
        if let Some(w) = out.as_mut() {
            writeln!(w, "{}", ReplayLog::line(record)).map_err(|e| HarnessError::Replay(e.into()))?;
        }
        Ok(())
    });
    let (_, summary) = result.map_err(|e| match e {
        HarnessError::Scenario(e) => Failure::from(e),
        other => Failure::Runtime(other.to_string()),
    })?;
    if let Some(mut w) = out {
        w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary is finite"));
    Ok(())
}

async fn run_live(sc: Scenario, addr: &str, options: ServeOptions) -> Result<(), Failure> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Failure::Runtime(format!("binding {addr}: {e}")))?;
    let server = serve(listener, sc, options).await.map_err(|e| Failure::Runtime(format!("{e:#}")))?;
    eprintln!("listening on http://{}", server.addr);
    tokio::select! {
        r = server.handle => match r {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(Failure::Runtime(e.to_string())),
            Err(e) => Err(Failure::Runtime(e.to_string())),
        },
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}

fn replay(log: PathBuf, fields: Vec<String>, csv: Option<PathBuf>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&log).map_err(|e| Failure::Validation(format!("{}: {e}", log.display())))?;
    let parsed = ReplayLog::from_jsonl(&text).map_err(|e| Failure::Validation(e.to_string()))?;
    let refs: Vec<&str> = fields.iter().map(|s| s.trim()).collect();
    let table = query(&parsed, &refs).map_err(|e| Failure::Validation(e.to_string()))?;
    match csv {
        Some(p) => std::fs::write(&p, table).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Validate { scenario } => load(&scenario).map(|sc| println!("ok: {}", sc.name)),
        Cmd::Replay { log, query, csv } => replay(log, query, csv),
        Cmd::Run { scenario, serve, seed, duration, log, speed } => load(&scenario)
            .and_then(|mut sc| override_and_check(&mut sc, seed, duration).map(|_| sc))
            .and_then(|sc| match serve {
                None => run_headless(sc, log),
                Some(addr) => tokio::runtime::Builder::new_multi_thread()
                    .enable_all()
                    .build()
                    .map_err(|e| Failure::Runtime(e.to_string()))?
                    .block_on(run_live(sc, &addr, ServeOptions { speed, log })),
            }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(VALIDATION)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("runtime fault: {msg}");
            ExitCode::from(RUNTIME)
        }
    }
}
