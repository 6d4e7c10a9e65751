//! `stpr`: run, sweep and inspect continual-learning experiments on synthetic video streams.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stpr_core::datagen::generate_stream;
use stpr_core::harness::{run_sequence_observed, MetricsReport};
use stpr_core::rundir::{self, Manifest, SweepRow};
use stpr_core::runconfig::{DistillStrategy, Preset, RunConfig};
use stpr_core::selftest::{run_selftest, Fault};
use stpr_core::tdmoe::RoutingStrategy;
use stpr_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "stpr", version, about = "Exemplar-free video class-incremental learning on synthetic streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one task sequence.
    Run(RunArgs),
    /// One run per value of a single config key, plus a combined table.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Dotted config key, e.g. `train.w`.
        #[arg(long)]
        param: String,
        /// Comma-separated values, run in the order given.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Summarize a finished run directory.
    Report {
        /// Directory written by `run`.
        dir: PathBuf,
    },
    /// Fast invariant checks.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    WrongGradient,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Config file (JSON or a previous run's manifest), or `default`.
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; defaults to a fresh directory under `$STPR_OUT`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    routing: Option<String>,
    #[arg(long)]
    distill: Option<String>,
    /// `key=value` override, repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

enum Failure {
    Config(String),
    Diverged(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Diverged(_) => EXIT_DIVERGED,
            Failure::Other(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Diverged(m) | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            Error::Divergence { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn load_config(source: &str) -> Result<RunConfig, Failure> {
    if source == "default" {
        return Ok(RunConfig::default());
    }
    let text = std::fs::read_to_string(source).map_err(|e| Failure::Config(format!("cannot read config '{source}': {e}")))?;
    let is_manifest = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .is_some_and(|v| v.get("config_hash").is_some());
    if is_manifest {
        return Manifest::parse(&text)
            .map(|m| m.config)
            .map_err(|e| Failure::Config(format!("{source}: {e}")));
    }
    Ok(RunConfig::from_json(&text)?)
}

fn resolve(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = load_config(&args.config)?;
    let invalid = |flag: &str, e: Error| Failure::Config(format!("--{flag}: {e}"));
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &args.preset {
        cfg.preset = p.parse::<Preset>().map_err(|e| invalid("preset", e))?;
    }
    if let Some(r) = &args.routing {
        cfg.train.routing = r.parse::<RoutingStrategy>().map_err(|e| invalid("routing", e))?;
    }
    if let Some(d) = &args.distill {
        cfg.train.distill = Some(d.parse::<DistillStrategy>().map_err(|e| invalid("distill", e))?);
    }
    for s in &args.sets {
        cfg.apply_override(s)?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_root() -> PathBuf {
    std::env::var_os("STPR_OUT").map_or_else(|| PathBuf::from("stpr-runs"), PathBuf::from)
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    match &cfg.out_dir {
        Some(d) => PathBuf::from(d),
        None => output_root().join(format!("{}-s{}-{}", cfg.preset.name(), cfg.seed, &cfg.config_hash()[..12])),
    }
}

fn execute(cfg: &RunConfig) -> Result<MetricsReport, Failure> {
    let stream = generate_stream(cfg.seed, &cfg.stream, &cfg.model)?;
    let tasks = stream.tasks.len();
    let (report, _) = run_sequence_observed(cfg, &stream, |b, _| eprintln!("task {}/{tasks} done", b + 1))?;
    Ok(report)
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = resolve(args)?;
    let dir = run_dir(&cfg);
    let report = match execute(&cfg) {
        Ok(r) => r,
        Err(f @ Failure::Diverged(_)) => {
            rundir::write_atomic(&dir.join(rundir::MANIFEST), Manifest::new(&cfg).to_json().as_bytes())
                .map_err(|e| Failure::Other(e.to_string()))?;
            return Err(f);
        }
        Err(f) => return Err(f),
    };
    rundir::write_run(&dir, &cfg, &report)?;
    print!("{}", rundir::summary(&Manifest::new(&cfg), &report));
    println!("\nwrote {}", dir.display());
    Ok(())
}

fn value_slug(param: &str, value: &str) -> String {
    let raw = format!("{param}={value}");
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=-+".contains(c) { c } else { '_' })
        .collect()
}

fn cmd_sweep(args: &RunArgs, param: &str, values: &[String]) -> Result<(), Failure> {
    let base = resolve(args)?;
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        cfg.out_dir = None;
        cfg.apply_override(&format!("{param}={v}"))?;
        cfg.validate()?;
        configs.push(cfg);
    }
    let root = match &base.out_dir {
        Some(d) => PathBuf::from(d),
        None => output_root().join(format!("sweep-{}-{}", value_slug(param, "").trim_end_matches('='), &base.config_hash()[..12])),
    };
    let mut rows = Vec::with_capacity(values.len());
    for (v, cfg) in values.iter().zip(&configs) {
        eprintln!("{param} = {v}");
        let report = execute(cfg)?;
        rundir::write_run(&root.join(value_slug(param, v)), cfg, &report)?;
        println!("{param}={v}: Acc {:.2}%  BWF {:.2}%", 100.0 * report.acc, 100.0 * report.bwf);
        rows.push(SweepRow {
            param: param.to_string(),
            value: v.clone(),
            acc: report.acc,
            bwf: report.bwf,
            routing_hit_rate: report.routing_hit_rate,
            config_hash: report.config_hash,
        });
    }
    rundir::write_atomic(&root.join(rundir::SWEEP), rundir::sweep_csv(&rows)?.as_bytes())?;
    println!("wrote {}", root.join(rundir::SWEEP).display());
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<(), Failure> {
    let (manifest, metrics) = rundir::load_run(dir).map_err(|e| Failure::Other(format!("{}: {e}", dir.display())))?;
    print!("{}", rundir::summary(&manifest, &metrics));
    Ok(())
}

fn cmd_selftest(fault: Option<FaultArg>) -> Result<(), Failure> {
    let fault = fault.map(|FaultArg::WrongGradient| Fault::WrongGradient);
    let outcomes = run_selftest(fault);
    let mut failed = Vec::new();
    for c in &outcomes {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<24} {:>6.2}s  {}", c.name, c.seconds, c.detail);
        if !c.passed {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Other(format!("selftest failed: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep { run, param, values } => cmd_sweep(run, param, values),
        Command::Report { dir } => cmd_report(dir),
        Command::Selftest { inject_fault } => cmd_selftest(*inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
