//! Command-line front end: run one scenario, sweep an axis, re-check a
//! saved trace, or recompute a run's statistics from its trace.
//!
//! Exit codes: 0 all checks pass, 1 configuration error, 2 checker FAIL,
//! 3 internal determinism error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chora_core::config::parse_config;
use chora_core::csvio::{csv_row, to_csv, CSV_HEADER};
use chora_core::harness::{run_scenario, sweep, Protocol, RunResult, Scenario, SweepAxis};
use chora_core::{check_all, result_from_trace, TraceLog};

#[derive(Parser)]
#[command(name = "chora", about = "Deterministic replication protocol simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one scenario over one or more seeds.
    Run(RunArgs),
    /// Simulate a scenario across an axis of values.
    Sweep(SweepArgs),
    /// Re-run the safety checker over a saved trace.
    Check {
        /// Path to a saved trace log.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Recompute a run's CSV row from a saved trace.
    Report {
        /// Path to a saved trace log.
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV and trace files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Write per-seed trace logs.
    #[arg(long, value_parser = ["on", "off"], default_value = "off")]
    trace: String,
    /// Override the configured protocol.
    #[arg(long)]
    protocol: Option<String>,
    /// Override the configured round length.
    #[arg(long)]
    round_length_ns: Option<u64>,
    /// Skip the safety checker verdict (still computed, not enforced).
    #[arg(long)]
    no_check: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Single seed (overrides the config's seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Run seeds 0..N (overrides the config's seed list).
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Axis to sweep.
    #[arg(long, value_parser = ["round-length", "delay-spread", "replicas", "proposer-count", "clients"])]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long)]
    values: String,
    /// Run seeds 0..N per value (default: the config's seed list).
    #[arg(long)]
    seeds: Option<u64>,
}

/// Failures mapped to exit codes.
enum Failure {
    Config(String),
    Checker(String),
    Determinism(String),
}

impl Failure {
    fn code(&self) -> ExitCode {
        match self {
            Failure::Config(_) => ExitCode::from(1),
            Failure::Checker(_) => ExitCode::from(2),
            Failure::Determinism(_) => ExitCode::from(3),
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Checker(m) | Failure::Determinism(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Check { trace } => cmd_check(&trace),
        Cmd::Report { trace } => cmd_report(&trace),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn load_scenario(common: &CommonArgs) -> Result<(Scenario, Vec<u64>), Failure> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| {
        Failure::Config(format!("cannot read config {}: {}", common.config.display(), e))
    })?;
    let cfg = parse_config(&text).map_err(|e| {
        Failure::Config(format!("{}: {}", common.config.display(), e))
    })?;
    let mut sc = cfg.scenario;
    if let Some(name) = &common.protocol {
        sc.protocol = Protocol::parse(name)
            .ok_or_else(|| Failure::Config(format!("unknown protocol '{}'", name)))?;
    }
    if let Some(t) = common.round_length_ns {
        sc.round_length_ns = t;
    }
    sc.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok((sc, cfg.seeds))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Config(format!("cannot create {}: {}", dir.display(), e)))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| Failure::Config(format!("cannot write {}: {}", path.display(), e)))
}

fn enforce_checks(results: &[RunResult], enabled: bool) -> Result<(), Failure> {
    if !enabled {
        return Ok(());
    }
    for r in results {
        if !r.checker.all_pass() {
            return Err(Failure::Checker(format!(
                "seed {}:\n{}",
                r.seed,
                r.checker.to_text()
            )));
        }
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let (sc, cfg_seeds) = load_scenario(&args.common)?;
    let seeds: Vec<u64> = match (args.seed, args.seeds) {
        (Some(s), _) => vec![s],
        (None, Some(n)) => (0..n).collect(),
        (None, None) => cfg_seeds,
    };
    let mut results = Vec::new();
    for &seed in &seeds {
        let out = run_scenario(&sc, seed)
            .map_err(|e| Failure::Config(format!("seed {}: {}", seed, e)))?;
        // replay guard: the same (config, seed) must reproduce the trace
        let again = run_scenario(&sc, seed)
            .map_err(|e| Failure::Config(format!("seed {}: {}", seed, e)))?;
        if again.trace.content_hash() != out.trace.content_hash() {
            return Err(Failure::Determinism(format!(
                "seed {} produced two different traces for the same configuration",
                seed
            )));
        }
        if args.common.trace == "on" {
            let path = args.common.out.join(format!("trace_{}.log", seed));
            write_file(&path, &out.trace.to_text())?;
        }
        results.push(out.result);
    }
    write_file(&args.common.out.join("results.csv"), &to_csv(&results))?;
    for r in &results {
        println!("{}", csv_row(r));
    }
    enforce_checks(&results, !args.common.no_check)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let (sc, cfg_seeds) = load_scenario(&args.common)?;
    let seeds: Vec<u64> = match args.seeds {
        Some(n) => (0..n).collect(),
        None => cfg_seeds,
    };
    let values = &args.values;
    let parse_u64s = || -> Result<Vec<u64>, Failure> {
        values
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Failure::Config(format!("bad value '{}'", v))))
            .collect()
    };
    let parse_u32s = || -> Result<Vec<u32>, Failure> {
        values
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Failure::Config(format!("bad value '{}'", v))))
            .collect()
    };
    let axis = match args.axis.as_str() {
        "round-length" => SweepAxis::RoundLength(parse_u64s()?),
        "delay-spread" => SweepAxis::DelaySpread(parse_u64s()?),
        "replicas" => SweepAxis::Replicas(parse_u32s()?),
        "proposer-count" => SweepAxis::ProposerCount(parse_u32s()?),
        _ => SweepAxis::Clients(parse_u32s()?),
    };
    let results = sweep(&sc, &axis, &seeds).map_err(|e| Failure::Config(e.to_string()))?;
    write_file(&args.common.out.join("sweep.csv"), &to_csv(&results))?;
    println!("{} rows written to {}", results.len(), args.common.out.join("sweep.csv").display());
    enforce_checks(&results, !args.common.no_check)
}

fn load_trace(path: &Path) -> Result<TraceLog, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read trace {}: {}", path.display(), e)))?;
    TraceLog::from_text(&text)
        .map_err(|e| Failure::Config(format!("{}: {}", path.display(), e)))
}

fn cmd_check(path: &Path) -> Result<(), Failure> {
    let trace = load_trace(path)?;
    let report = check_all(&trace, &[]);
    print!("{}", report.to_text());
    if report.all_pass() {
        Ok(())
    } else {
        Err(Failure::Checker(format!("checker FAIL on {}", path.display())))
    }
}

fn cmd_report(path: &Path) -> Result<(), Failure> {
    let trace = load_trace(path)?;
    let result = result_from_trace(&trace, &[]).map_err(|e| Failure::Config(e.to_string()))?;
    println!("{}", CSV_HEADER);
    println!("{}", csv_row(&result));
    Ok(())
}
