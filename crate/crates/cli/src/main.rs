//! `hamgraph` command line front end.
//!
//! Exit codes: 0 success, 1 configuration, 2 invalid rate matrix,
//! 3 bridge non-convergence, 4 sampler rate bound, 5 other numerical failure.

mod commands;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hamgraph::catalog::{builtin, Scenario, BUILTIN_SCENARIOS};
use hamgraph::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(name = "hamgraph", version, about = "Hamiltonian flows, jump processes and bridges on graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate a Hamiltonian flow, extract its rate matrices and sample paths.
    Geodesic(RunArgs),
    /// Solve a bridge between two marginals.
    Bridge(RunArgs),
    /// Sample paths of a generator and compare with the master equation.
    Simulate(RunArgs),
    /// Floquet, stationarity, Markov-condition and symplecticity diagnostics.
    Analyze(RunArgs),
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// Scenario JSON, or a run.json written by an earlier run.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    config: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    dt: Option<f64>,
    /// Bridge tolerance on the marginal L1 residual.
    #[arg(long)]
    tol: Option<f64>,
    /// Cross-check the bridge entropy by enumerating paths with N steps.
    #[arg(long, value_name = "N")]
    oracle: Option<usize>,
    #[arg(long, value_name = "M")]
    particles: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

/// Options that live outside the scenario and are echoed into run.json.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Options {
    pub tol: f64,
    #[serde(default)]
    pub oracle: Option<usize>,
}

impl Default for Options {
    fn default() -> Self {
        Options { tol: 1e-8, oracle: None }
    }
}

#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub options: &'a Options,
    pub scenario: &'a Scenario,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    /// Maps a numerical error raised while running to its exit code.
    pub fn run(e: Error) -> Self {
        let code = match e {
            Error::InvalidGenerator { .. } => 2,
            Error::NonConvergence { .. } | Error::NonconvergentImplicitStep(_) => 3,
            Error::RateBoundExceeded { .. } | Error::RateBoundRequired => 4,
            _ => 5,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn parse_scenario(v: Value, origin: &str) -> Result<Scenario, Failure> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { String::new() } else { format!(" at `{path}`") };
        Failure::config(format!("{origin}: {}{key}", e.into_inner()))
    })
}

fn load(args: &RunArgs) -> Result<(Scenario, Options), Failure> {
    let (mut scenario, mut options) = match (&args.scenario, &args.config) {
        (Some(name), _) => {
            let s = builtin(name).ok_or_else(|| {
                Failure::config(format!(
                    "unknown scenario `{name}`; built-in scenarios: {}",
                    BUILTIN_SCENARIOS.join(", ")
                ))
            })?;
            (s, Options::default())
        }
        (None, Some(path)) => read_config(path)?,
        (None, None) => return Err(Failure::config("one of --config or --scenario is required")),
    };
    if let Some(dt) = args.dt {
        scenario.dt = dt;
    }
    if let Some(m) = args.particles {
        scenario.sampler.particles = m;
    }
    if let Some(seed) = args.seed {
        scenario.sampler.seed = seed;
    }
    if let Some(tol) = args.tol {
        options.tol = tol;
    }
    if args.oracle.is_some() {
        options.oracle = args.oracle;
    }
    if !(scenario.dt > 0.0) || !scenario.dt.is_finite() {
        return Err(Failure::config(format!("dt must be positive, got {}", scenario.dt)));
    }
    if !(options.tol > 0.0) {
        return Err(Failure::config(format!("tol must be positive, got {}", options.tol)));
    }
    if !(scenario.horizon[1] >= scenario.horizon[0]) {
        return Err(Failure::config("horizon must satisfy t0 <= t1"));
    }
    Ok((scenario, options))
}

fn read_config(path: &Path) -> Result<(Scenario, Options), Failure> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{origin}: {e}")))?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| Failure::config(format!("{origin}: {e}")))?;
    // A run.json from an earlier run carries the scenario and options.
    if let Some(obj) = v.as_object_mut() {
        if obj.contains_key("command") && obj.contains_key("scenario") {
            let scenario = parse_scenario(obj.remove("scenario").unwrap_or(Value::Null), &origin)?;
            let options = match obj.remove("options") {
                Some(o) => serde_path_to_error::deserialize(o)
                    .map_err(|e| {
                        let path = e.path().to_string();
                        Failure::config(format!("{origin}: {} at `options.{path}`", e.into_inner()))
                    })?,
                None => Options::default(),
            };
            return Ok((scenario, options));
        }
    }
    Ok((parse_scenario(v, &origin)?, Options::default()))
}

fn execute(command: &Command) -> Result<(), Failure> {
    let (name, args) = match command {
        Command::Geodesic(a) => ("geodesic", a),
        Command::Bridge(a) => ("bridge", a),
        Command::Simulate(a) => ("simulate", a),
        Command::Analyze(a) => ("analyze", a),
    };
    let (scenario, options) = load(args)?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::config(format!("{}: {e}", args.out.display())))?;
    let record = RunRecord {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        options: &options,
        scenario: &scenario,
    };
    commands::write_json(&args.out.join("run.json"), &record)?;
    let ctx = commands::Context {
        scenario: &scenario,
        options: &options,
        out: &args.out,
    };
    hamgraph::par::with_threads(args.threads, || match command {
        Command::Geodesic(_) => commands::geodesic(&ctx),
        Command::Bridge(_) => commands::bridge(&ctx),
        Command::Simulate(_) => commands::simulate(&ctx),
        Command::Analyze(_) => commands::analyze(&ctx),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hamgraph: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
