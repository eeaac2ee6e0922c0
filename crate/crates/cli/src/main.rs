use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use kvpack_core::config::{Config, SchedulerKind};
use kvpack_core::oracle::DEFAULT_SLACK;
use kvpack_core::sim::{self, write_comparison, write_outputs};
use kvpack_core::verify::{run_suite, SuiteOptions};
use kvpack_core::workload::{gen_poisson, load_trace, save_trace, scale_trace, Trace};

#[derive(Parser)]
#[command(name = "kvpack", version, about = "Multi-GPU KV-cache placement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; every section is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Poisson trace CSV.
    GenTrace {
        #[command(flatten)]
        common: Common,
        /// Output file.
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
        /// Arrival window in slots; defaults to `sim.duration_slots`.
        #[arg(long)]
        duration: Option<u64>,
        /// Overrides `workload.mean_interarrival_slots`.
        #[arg(long)]
        mean_interarrival: Option<f64>,
    },
    /// Run one scheduler and write `<label>.csv` and `<label>.json`.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Overrides `scheduler.kind`.
        #[arg(long)]
        scheduler: Option<SchedulerKind>,
    },
    /// Run several schedulers on one trace and write a comparison table.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated schedulers; the first is the reference row.
        #[arg(long, value_delimiter = ',', default_value = "mell,bf,wf,lb")]
        schedulers: Vec<SchedulerKind>,
    },
    /// Run the verification sweeps; exits 2 if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        /// Random operations per seed in the property sweep.
        #[arg(long, default_value_t = 2000)]
        ops: usize,
        /// Peak concurrency of the traces checked against the exact optimum.
        #[arg(long, default_value_t = 12)]
        max_requests: usize,
        #[arg(long, default_value_t = DEFAULT_SLACK)]
        slack: usize,
        /// Also write `verify.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Replay this trace instead of `workload.trace` or a generated one.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Disable operation batching for mell.
    #[arg(long)]
    no_batching: bool,
}

/// Exit codes: 1 for bad input, 2 for failed verification.
enum Failure {
    Input(String),
    Verify,
}

impl From<kvpack_core::Error> for Failure {
    fn from(e: kvpack_core::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<Config, Failure> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    Ok(cfg)
}

/// The trace to replay: `--trace`, then `workload.trace`, else a Poisson trace over
/// the run's duration.
fn resolve_trace(cfg: &Config, flag: Option<&Path>) -> Result<Trace, Failure> {
    let path = flag.map(Path::to_path_buf).or_else(|| cfg.workload.trace.clone());
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Failure::Input(format!("trace file {} does not exist", p.display())));
            }
            let trace = load_trace(&p)?;
            Ok(if cfg.workload.scale > 1 { scale_trace(&trace, cfg.workload.scale)? } else { trace })
        }
        None => Ok(gen_poisson(
            cfg.workload.mean_interarrival_slots,
            cfg.sim.duration_slots,
            &cfg.workload.lengths,
            cfg.sim.seed,
        )?),
    }
}

fn simulate(cfg: &Config, run: &RunArgs) -> Result<(), Failure> {
    let trace = resolve_trace(cfg, run.trace.as_deref())?;
    let result = sim::run(cfg, &trace)?;
    let label = cfg.scheduler.label();
    write_outputs(&result, &run.out, &label)?;
    let s = &result.summary;
    println!(
        "{label}: peak {} GPUs, utilization {:.3}, {} migrations, {} aborted",
        s.peak_gpus, s.mean_utilization, s.total_migrations, s.aborted
    );
    Ok(())
}

fn compare(cfg: &Config, run: &RunArgs, schedulers: &[SchedulerKind]) -> Result<(), Failure> {
    if schedulers.is_empty() {
        return Err(Failure::Input("--schedulers is empty".into()));
    }
    let trace = resolve_trace(cfg, run.trace.as_deref())?;
    let configs: Vec<Config> = schedulers
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.scheduler.kind = k;
            c
        })
        .collect();
    let (results, rows) = sim::compare(&configs, &trace)?;
    for (r, c) in results.iter().zip(&configs) {
        write_outputs(r, &run.out, &c.scheduler.label())?;
    }
    write_comparison(&rows, BufWriter::new(File::create(run.out.join("comparison.csv"))?))?;
    for r in &rows {
        println!(
            "{:<16} peak {:>4}  utilization {:.3}  migrations {:>7}  reduction {:>6.1}%",
            r.scheduler, r.peak_gpus, r.mean_utilization, r.total_migrations, r.gpu_reduction_pct
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenTrace {
            common,
            out,
            duration,
            mean_interarrival,
        } => {
            let cfg = load_config(&common)?;
            let mean = mean_interarrival.unwrap_or(cfg.workload.mean_interarrival_slots);
            let trace = gen_poisson(mean, duration.unwrap_or(cfg.sim.duration_slots), &cfg.workload.lengths, cfg.sim.seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            save_trace(&trace, &out)?;
            println!("{} requests written to {}", trace.len(), out.display());
        }
        Command::Simulate { common, run, scheduler } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = scheduler {
                cfg.scheduler.kind = k;
            }
            if run.no_batching {
                cfg.scheduler.batching = false;
            }
            simulate(&cfg, &run)?;
        }
        Command::Compare { common, run, schedulers } => {
            let mut cfg = load_config(&common)?;
            if run.no_batching {
                cfg.scheduler.batching = false;
            }
            compare(&cfg, &run, &schedulers)?;
        }
        Command::Verify {
            common,
            seeds,
            ops,
            max_requests,
            slack,
            out,
        } => {
            let cfg = load_config(&common)?;
            let opts = SuiteOptions {
                seeds,
                ops_per_seed: ops,
                max_concurrency: max_requests,
                slack,
                ..SuiteOptions::default()
            };
            info!("verifying with {seeds} seeds");
            let report = run_suite(&cfg, &opts)?;
            for c in &report.checks {
                println!("{}", c.line());
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("verify.json"), report.to_json()? + "\n")?;
            }
            if !report.pass() {
                return Err(Failure::Verify);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KVPACK_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verify) => {
            warn!("verification failed");
            eprintln!("verification failed");
            ExitCode::from(2)
        }
    }
}
