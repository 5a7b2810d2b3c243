//! Argument parsing and dispatch. Every subcommand writes exactly one
//! manifest into `--out-dir`.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use fem_core::check::Fault;
use fem_core::priors::PriorFamily;
use serde_json::json;

use crate::commands::{bench, check, degrees, golden, toy};
use crate::config::{env_overrides, ToyRunConfig};
use crate::manifest::{blob_hash, RunManifest};
use crate::{CliError, EXIT_FAILURE, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "fem", version, about = "Free-energy read: property suites, degree table, toy experiment, timing bench")]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, env = "FEM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// JSON run configuration (read by train-toy).
    #[arg(long, global = true, env = "FEM_CONFIG")]
    pub config: Option<PathBuf>,
    /// Single-threaded execution with reproducible output.
    #[arg(long, global = true, env = "FEM_DETERMINISTIC")]
    pub deterministic: bool,
    /// Directory for manifests and artifacts.
    #[arg(long, global = true, env = "FEM_OUT_DIR", default_value = "fem-out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the oracle and property suites matching a filter.
    Check(CheckArgs),
    /// Print the minimal truncation degrees for R in {5, 10} and eps in {1e-4, 1e-6, 1e-8}.
    TableDegrees,
    /// Train the toy argmax models from a JSON config.
    TrainToy,
    /// Time dense and streaming reads along a doubling T ladder.
    Bench(BenchArgs),
    /// Write golden CSV vectors for cross-implementation parity.
    ExportGolden(GoldenArgs),
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Suite name, module name or substring; empty or "all" selects everything.
    #[arg(default_value = "all")]
    pub filter: String,
    /// Instances per suite (defaults to each suite's own count).
    #[arg(long)]
    pub instances: Option<usize>,
    /// Fault injected into the library side: none | grad-sign.
    #[arg(long, default_value = "none")]
    pub fault: Fault,
    /// Print JSON lines instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Prior families to time.
    #[arg(long, value_delimiter = ',', default_value = "decay,gla,aft,ssm,softmax")]
    pub families: Vec<PriorFamily>,
    /// Doubling ladder of sequence lengths.
    #[arg(long = "t", value_delimiter = ',', default_value = "1024,2048,4096")]
    pub ladder: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    /// LSE branch: off | on | both.
    #[arg(long, default_value = "both")]
    pub lse: String,
    /// Also time the dense path of the streaming families.
    #[arg(long)]
    pub with_dense: bool,
    #[arg(long, default_value_t = 7)]
    pub trials: usize,
    /// Minimum wall time per trial, in milliseconds.
    #[arg(long, default_value_t = 50)]
    pub min_time_ms: u64,
}

#[derive(Debug, Args)]
pub struct GoldenArgs {
    /// Rows per op.
    #[arg(long, default_value_t = 32)]
    pub rows: usize,
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match dispatch(&cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let _ = out.flush();
            eprintln!("fem: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    if cli.config.is_some() && !matches!(cli.command, Command::TrainToy) {
        return Err(CliError::Usage("--config is only read by train-toy".into()));
    }
    fs::create_dir_all(&cli.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", cli.out_dir.display())))?;
    match &cli.command {
        Command::Check(a) => cmd_check(cli, a, out),
        Command::TableDegrees => cmd_table_degrees(cli, out),
        Command::TrainToy => cmd_train_toy(cli, out),
        Command::Bench(a) => cmd_bench(cli, a, out),
        Command::ExportGolden(a) => cmd_export_golden(cli, a, out),
    }
}

fn cmd_check(cli: &Cli, a: &CheckArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let fault = match a.fault {
        Fault::None => "none",
        Fault::GradientSign => "grad-sign",
    };
    let config = json!({"filter": a.filter, "instances": a.instances, "fault": fault});
    let mut manifest = RunManifest::begin("check", config, cli.seed, cli.deterministic);
    let opts = check::CheckOptions {
        filter: a.filter.clone(),
        instances: a.instances,
        fault: a.fault,
        deterministic: cli.deterministic,
    };
    let reports = check::run_check(&opts, cli.seed)?;
    let lines: String = reports.iter().map(|r| r.to_json_line() + "\n").collect();
    if a.json {
        write!(out, "{lines}")?;
    } else {
        write!(out, "{}", check::format_table(&reports))?;
    }
    let report_path = cli.out_dir.join("check_report.jsonl");
    fs::write(&report_path, &lines)?;
    let passed = check::all_pass(&reports);
    manifest.artifacts.push(report_path);
    manifest.extra = json!({
        "suites": reports.len(),
        "failed": reports.iter().filter(|r| !r.pass).map(|r| r.op.clone()).collect::<Vec<_>>(),
    });
    manifest.finish(&cli.out_dir)?;
    Ok(if passed { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_table_degrees(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    let config = json!({"radii": degrees::RADII, "epsilons": degrees::EPSILONS});
    let mut manifest = RunManifest::begin("table-degrees", config, cli.seed, cli.deterministic);
    let rows = degrees::table_degrees()?;
    write!(out, "{}", degrees::format_table(&rows))?;
    let path = cli.out_dir.join("table_degrees.csv");
    fs::write(&path, degrees::to_csv(&rows))?;
    manifest.artifacts.push(path);
    let grid: Vec<Vec<usize>> = rows.iter().map(|r| r.iter().map(|c| c.degree).collect()).collect();
    manifest.extra = json!({"degrees": grid});
    manifest.finish(&cli.out_dir)?;
    Ok(EXIT_OK)
}

fn cmd_train_toy(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Usage("train-toy needs --config <file.json>".into()))?;
    let cfg = ToyRunConfig::load(path, &env_overrides())?;
    let config = serde_json::to_value(&cfg).map_err(|e| CliError::Io(e.to_string()))?;
    let mut manifest = RunManifest::begin("train-toy", config, cli.seed, cli.deterministic);
    let results = toy::run_train_toy(&cfg, cli.seed, &cli.out_dir, out)?;
    let mut all_bytes = Vec::new();
    for r in &results {
        writeln!(out, "{}", toy::final_line(r))?;
        manifest.artifacts.push(r.metrics.clone());
        manifest.artifacts.push(r.checkpoint.clone());
        all_bytes.extend_from_slice(&r.checkpoint_bytes);
    }
    manifest.param_hash = blob_hash(&all_bytes);
    manifest.extra = json!({
        "final": results.iter().map(|r| json!({"model": r.model, "row": r.final_row})).collect::<Vec<_>>(),
    });
    manifest.finish(&cli.out_dir)?;
    Ok(EXIT_OK)
}

fn parse_lse(s: &str) -> Result<Vec<bool>, CliError> {
    match s {
        "off" => Ok(vec![false]),
        "on" => Ok(vec![true]),
        "both" => Ok(vec![false, true]),
        other => Err(CliError::Usage(format!("--lse must be off, on or both (got '{other}')"))),
    }
}

fn cmd_bench(cli: &Cli, a: &BenchArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let opts = bench::BenchOptions {
        families: a.families.clone(),
        ladder: a.ladder.clone(),
        channels: a.channels,
        lse: parse_lse(&a.lse)?,
        with_dense: a.with_dense,
        trials: a.trials,
        min_time: Duration::from_millis(a.min_time_ms),
    };
    let families: Vec<&str> = a.families.iter().map(|f| f.name()).collect();
    let config = json!({
        "families": families, "t": a.ladder, "channels": a.channels, "lse": a.lse,
        "with_dense": a.with_dense, "trials": a.trials, "min_time_ms": a.min_time_ms,
    });
    let mut manifest = RunManifest::begin("bench", config, cli.seed, cli.deterministic);
    let (rows, bands) = bench::run_bench(&opts, cli.seed)?;
    for b in &bands {
        writeln!(out, "{}", b.line())?;
    }
    let path = cli.out_dir.join("bench.csv");
    bench::write_csv(&path, &rows)?;
    manifest.artifacts.push(path);
    manifest.extra = json!({
        "linear_band": bench::LINEAR_BAND,
        "quadratic_band": bench::QUADRATIC_BAND,
        "bands": bands,
    });
    manifest.finish(&cli.out_dir)?;
    Ok(if bands.iter().all(|b| b.pass) { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_export_golden(cli: &Cli, a: &GoldenArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut manifest = RunManifest::begin("export-golden", json!({"rows": a.rows}), cli.seed, cli.deterministic);
    let dir = cli.out_dir.join("golden");
    let paths = golden::run_export_golden(&dir, cli.seed, a.rows)?;
    let mut bytes = Vec::new();
    for p in &paths {
        writeln!(out, "{}", p.display())?;
        bytes.extend(fs::read(p)?);
    }
    manifest.param_hash = blob_hash(&bytes);
    manifest.artifacts = paths;
    manifest.finish(&cli.out_dir)?;
    Ok(EXIT_OK)
}
