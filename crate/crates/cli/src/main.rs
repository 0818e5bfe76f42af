mod dataset;
mod evaluate;
mod predict;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};
use tcd_core::config::RunConfig;
use tcd_core::predict::adapter::AdapterOptions;
use tcd_core::{Error, Result};

/// Tiled tree-cover prediction, evaluation and dataset tooling.
#[derive(Parser, Debug)]
#[command(name = "tcd", version)]
struct Cli {
    /// Plain-text `key = value` config file. Flags override it; TCD_<KEY> env vars sit in between.
    #[arg(long, global = true, env = "TCD_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a model over a raster.
    #[command(subcommand)]
    Predict(predict::PredictCmd),
    /// Score predictions against ground truth.
    #[command(subcommand)]
    Evaluate(evaluate::EvaluateCmd),
    /// Summarize a results directory.
    Report(report::ReportArgs),
    /// Dataset splits, COCO export and mask rasterization.
    #[command(subcommand)]
    Dataset(dataset::DatasetCmd),
}

/// Tiling and execution flags shared by the predict commands.
#[derive(Args, Debug, Default)]
pub struct RunFlags {
    #[arg(long)]
    tile_size: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Worker threads (capped by the model's own concurrency limit).
    #[arg(long)]
    workers: Option<usize>,
    /// Extra attempts per tile after a model error.
    #[arg(long)]
    retries: Option<usize>,
    /// Predict tiles even when every pixel is nodata or zero.
    #[arg(long)]
    no_skip_empty: bool,
    /// Adapter processes to run in parallel.
    #[arg(long)]
    adapter_processes: Option<usize>,
    /// Seconds to wait for each adapter response.
    #[arg(long)]
    request_timeout: Option<f64>,
}

impl RunFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.tile_size, self.tile_size);
        set(&mut cfg.overlap, self.overlap);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.workers, self.workers);
        set(&mut cfg.retries, self.retries);
        set(&mut cfg.adapter_processes, self.adapter_processes);
        set(&mut cfg.request_timeout_secs, self.request_timeout);
        if self.no_skip_empty {
            cfg.skip_empty = false;
        }
    }
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub struct Context {
    pub cfg: RunConfig,
}

impl Context {
    pub fn adapter_options(&self) -> AdapterOptions {
        AdapterOptions {
            handshake_timeout: Duration::from_secs_f64(self.cfg.handshake_timeout_secs),
            request_timeout: Duration::from_secs_f64(self.cfg.request_timeout_secs),
            processes: self.cfg.adapter_processes,
        }
    }
}

/// What a command hands back for the stdout footer.
#[derive(Default)]
pub struct Outcome {
    pub outputs: Map<String, Value>,
    pub extra: Map<String, Value>,
}

impl Outcome {
    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), json!(path.display().to_string()));
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} {} does not exist", path.display())))
    }
}

pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(Error::Io)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Predict(p) => p.name(),
        Command::Evaluate(e) => e.name(),
        Command::Report(_) => "report",
        Command::Dataset(d) => d.name(),
    }
}

fn execute(cli: Cli) -> Result<Outcome> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Predict(cmd) => {
            cmd.apply(&mut cfg);
            cfg.validate()?;
            predict::run(cmd, &Context { cfg })
        }
        Command::Evaluate(cmd) => {
            cmd.apply(&mut cfg);
            cfg.validate()?;
            evaluate::run(cmd, &Context { cfg })
        }
        Command::Report(args) => {
            cfg.validate()?;
            report::run(args, &Context { cfg })
        }
        Command::Dataset(cmd) => {
            cmd.apply(&mut cfg);
            cfg.validate()?;
            dataset::run(cmd, &Context { cfg })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = command_name(&cli.command);
    let (code, footer) = match execute(cli) {
        Ok(out) => {
            let mut footer = Map::new();
            footer.insert("status".into(), json!("ok"));
            footer.insert("command".into(), json!(name));
            footer.insert("outputs".into(), Value::Object(out.outputs));
            footer.extend(out.extra);
            (0, Value::Object(footer))
        }
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            eprintln!("tcd {name}: error: {e}");
            (code, json!({"status": "error", "command": name, "exit_code": code, "error": e.to_string(), "outputs": {}}))
        }
    };
    println!("{footer}");
    ExitCode::from(code)
}
