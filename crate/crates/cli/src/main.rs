//! `slidereg`: batch entry points for every pipeline stage.
//!
//! Exit codes: 0 success, 1 pipeline failure, 2 usage error. With `--json`
//! each command prints one envelope object on stdout.

mod commands;
mod config;
mod schema;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::Config;

#[derive(Debug, Parser)]
#[command(name = "slidereg", version, about = "Cross-microscope annotation transfer toolkit")]
pub struct Cli {
    /// Print one machine-readable JSON object instead of text.
    #[arg(long, global = true, env = "SLIDEREG_JSON")]
    pub json: bool,
    /// JSON config providing defaults for store, profiles, workers, listen and seed.
    #[arg(long, global = true, env = "SLIDEREG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Worker threads for per-region work.
    #[arg(long, global = true, env = "SLIDEREG_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes and render all six views per region into a new store.
    Simulate(SimulateArgs),
    /// Fit a stage calibration from paired readings.
    Calibrate(CalibrateArgs),
    /// Run annotation transfer chains and record the results.
    Transfer(TransferArgs),
    /// Assign regions to train/test/val.
    Split(SplitArgs),
    /// Score transferred boxes against simulator ground truth.
    EvalTransfer(StoreArgs),
    /// Run the loss-kernel gradient suite.
    LossesCheck(LossesArgs),
    /// Write annotations as a COCO detection dataset.
    ExportCoco(ExportArgs),
    /// Print the JSON Schema for a command's `--json` output.
    Schema(SchemaArgs),
    /// Run the HTTP and WebSocket service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    #[arg(long, env = "SLIDEREG_STORE")]
    pub store: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, env = "SLIDEREG_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    pub regions: usize,
    /// Store directory to create.
    #[arg(long, env = "SLIDEREG_STORE")]
    pub out: Option<PathBuf>,
    /// Render the low-cost microscope without optical degradation.
    #[arg(long, conflicts_with = "profiles")]
    pub ideal: bool,
    /// Profiles directory (`*.json`) replacing the built-in ones.
    #[arg(long, env = "SLIDEREG_PROFILES")]
    pub profiles: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// JSON with `pairs: [[[x, y], [x, y]], ...]` and optional `from` / `to` endpoints.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_parser = ["cross_magnification", "cross_microscope"])]
    pub kind: String,
    /// Source endpoint as `microscope:magnification`, e.g. `hcm:100`.
    #[arg(long)]
    pub from: Option<String>,
    /// Destination endpoint as `microscope:magnification`.
    #[arg(long)]
    pub to: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long, env = "SLIDEREG_STORE")]
    pub store: Option<PathBuf>,
    /// Region to transfer; repeatable.
    #[arg(long = "region", required_unless_present = "all", conflicts_with = "all")]
    pub regions: Vec<String>,
    /// Transfer every region in the store.
    #[arg(long)]
    pub all: bool,
    /// Profiles directory; defaults to the store's own.
    #[arg(long, env = "SLIDEREG_PROFILES")]
    pub profiles: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, env = "SLIDEREG_STORE")]
    pub store: Option<PathBuf>,
    /// Train, test and val fractions.
    #[arg(long, value_parser = parse_fractions, default_value = "0.665,0.30,0.035")]
    pub fractions: [f64; 3],
    #[arg(long, env = "SLIDEREG_SEED")]
    pub seed: Option<u64>,
    /// Allowed per-class deviation from the target fractions.
    #[arg(long, default_value_t = slidereg_core::datastore::DEFAULT_CLASS_TOLERANCE)]
    pub tolerance: f64,
}

fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("`{p}` is not a number")))
        .collect::<Result<_, _>>()?;
    let f: [f64; 3] = v.try_into().map_err(|v: Vec<f64>| format!("expected train,test,val; got {} values", v.len()))?;
    if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(format!("{f:?} must be non-negative and sum to 1"));
    }
    Ok(f)
}

#[derive(Debug, Args)]
pub struct LossesArgs {
    #[arg(long, env = "SLIDEREG_SEED")]
    pub seed: Option<u64>,
    /// Random points per kernel.
    #[arg(long, default_value_t = 20)]
    pub points: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, env = "SLIDEREG_STORE")]
    pub store: Option<PathBuf>,
    /// Only regions assigned to this split.
    #[arg(long, value_parser = ["train", "test", "val"])]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    /// Command name, or `envelope`.
    pub command: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SLIDEREG_LISTEN")]
    pub listen: Option<SocketAddr>,
    #[arg(long, env = "SLIDEREG_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, env = "SLIDEREG_PROFILES")]
    pub profiles: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Calibrate(_) => "calibrate",
            Command::Transfer(_) => "transfer",
            Command::Split(_) => "split",
            Command::EvalTransfer(_) => "eval-transfer",
            Command::LossesCheck(_) => "losses-check",
            Command::ExportCoco(_) => "export-coco",
            Command::Schema(_) => "schema",
            Command::Serve(_) => "serve",
        }
    }
}

/// Bad flags or inputs that were never valid; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// What a command produced: the JSON result, a text rendering and whether
/// the pipeline step succeeded.
pub struct Report {
    pub result: Value,
    pub text: String,
    pub ok: bool,
}

fn emit_error(json_mode: bool, command: &str, kind: &str, message: &str) {
    if json_mode {
        let v = json!({"command": command, "ok": false, "error": {"kind": kind, "message": message}});
        println!("{v}");
    } else {
        eprintln!("error: {message}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SLIDEREG_LOG", "warn")).init();
    let json_requested = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            if json_requested {
                emit_error(true, "", "usage", e.to_string().trim());
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    let outcome = Config::load_optional(cli.config.as_deref()).and_then(|cfg| commands::run(&cli, &cfg));
    match outcome {
        Ok(Some(report)) => {
            if cli.json {
                println!("{}", json!({"command": name, "ok": report.ok, "result": report.result}));
            } else {
                print!("{}", report.text);
            }
            if report.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            let is_usage = e.downcast_ref::<UsageError>().is_some();
            emit_error(cli.json, name, if is_usage { "usage" } else { "pipeline" }, &format!("{e:#}"));
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

impl Config {
    fn load_optional(path: Option<&std::path::Path>) -> anyhow::Result<Config> {
        match path {
            Some(p) => Config::load(p).map_err(|e| usage(format!("{e:#}"))),
            None => Ok(Config::default()),
        }
    }
}
