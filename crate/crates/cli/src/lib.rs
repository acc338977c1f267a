//! Command-line driver: reads an experiment config, runs the scheduler,
//! planner and simulator, and writes the resulting artifacts.

pub mod artifacts;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use blockcp_core::metrics::{measure, sweep_csv, weak_scaling_sweep};
use blockcp_core::workload::generate_trace;
use blockcp_core::{schedule, Batch, Schedule, ScheduleConfig, SchedulerKind};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::artifacts::{to_json, write_atomic, PlanFile, ScheduleFile};
use crate::config::{ExperimentConfig, WorkloadConfig};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const SCHEDULE_FILE: &str = "schedule.json";
pub const PLAN_FILE: &str = "plan.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMELINE_FILE: &str = "timeline.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const COMPARE_FILE: &str = "compare.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] blockcp_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for bad invocations or configs, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(blockcp_core::Error::Parameter(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "blockcp",
    version,
    about = "Block-level context-parallel attention scheduler and simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic sequence trace.
    GenTrace(GenTraceArgs),
    /// Assign units to workers and write the schedule.
    Schedule(RunArgs),
    /// Build the communication plan for a schedule.
    Plan(RunArgs),
    /// Simulate one batch and write the report and timeline.
    Simulate(RunArgs),
    /// Weak-scaling sweep over worker counts, block sizes and schedulers.
    Sweep(SweepArgs),
    /// Run several schedulers on the same batch.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config file (TOML).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Read sequences from a trace file instead of sampling them.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub tokens_per_worker: Option<u64>,
    #[arg(long)]
    pub block_size: Option<u64>,
    #[arg(long)]
    pub coalesce: Option<usize>,
    /// Per-worker network bandwidth in bytes/s.
    #[arg(long)]
    pub nic_bandwidth: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub scheduler: Option<SchedulerKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpecKind {
    Lognormal,
    Bimodal,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub spec: Option<SpecKind>,
    /// One value, or two for a bimodal spec.
    #[arg(long, value_delimiter = ',')]
    pub sigma: Vec<f64>,
    /// One value, or two for a bimodal spec.
    #[arg(long, value_delimiter = ',')]
    pub mean: Vec<f64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub min_length: Option<u64>,
    #[arg(long)]
    pub max_length: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub worker_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub block_sizes: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pub schedulers: Vec<SchedulerKind>,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',', default_value = "fcp,ring,bytescale")]
    pub schedulers: Vec<SchedulerKind>,
}

/// A loaded config plus the directory relative paths in it resolve against.
struct Experiment {
    cfg: ExperimentConfig,
    base_dir: PathBuf,
}

impl Experiment {
    fn load(common: &CommonArgs) -> Result<Self, CliError> {
        let (mut cfg, base_dir) = match &common.config {
            Some(path) => (
                ExperimentConfig::load(path)?,
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (ExperimentConfig::default(), PathBuf::new()),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &common.output {
            cfg.output = out.clone();
        }
        if let Some(trace) = &common.trace {
            let trace = std::path::absolute(trace).map_err(|e| CliError::io(trace, e))?;
            cfg.workload = WorkloadConfig::File { path: trace };
        }
        if let Some(n) = common.workers {
            cfg.cluster.n_workers = n;
        }
        if let Some(t) = common.tokens_per_worker {
            cfg.cluster.tokens_per_worker = t;
        }
        if let Some(b) = common.block_size {
            cfg.sharding.block_size = b;
        }
        if let Some(c) = common.coalesce {
            cfg.planner.coalesce = c;
        }
        if let Some(bw) = common.nic_bandwidth {
            cfg.cluster.nic_bandwidth = bw;
        }
        Ok(Experiment { cfg, base_dir })
    }

    fn output(&self, name: &str) -> PathBuf {
        self.cfg.output.join(name)
    }

    fn batch(&self) -> Result<(Batch, ScheduleConfig), CliError> {
        let sc = self.cfg.schedule_config()?;
        let workload = self.cfg.workload.resolve(&self.base_dir)?;
        let batch =
            workload.first_batch(sc.n_workers, sc.tokens_per_worker, self.cfg.workload_seed())?;
        Ok((batch, sc))
    }

    fn schedule(&self) -> Result<(Schedule, ScheduleConfig), CliError> {
        let (batch, sc) = self.batch()?;
        let s = schedule(self.cfg.scheduler, &batch, &sc)?;
        log::info!(
            "{} placed {} units from {} sequences on {} workers",
            s.chosen,
            s.placement.units.len(),
            batch.sequences.len(),
            sc.n_workers
        );
        Ok((s, sc))
    }
}

fn run_args(args: &RunArgs) -> Result<Experiment, CliError> {
    let mut exp = Experiment::load(&args.common)?;
    if let Some(kind) = args.scheduler {
        exp.cfg.scheduler = kind;
    }
    Ok(exp)
}

fn gen_trace(args: &GenTraceArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut exp = Experiment::load(&args.common)?;
    if let Some(kind) = args.spec {
        let pick = |v: &[f64], i: usize, name: &str| {
            v.get(i)
                .or(v.first())
                .copied()
                .ok_or_else(|| CliError::Usage(format!("--spec needs --{name}")))
        };
        let count = exp
            .cfg
            .workload
            .count()
            .unwrap_or(config::DEFAULT_TRACE_COUNT);
        let (min_length, max_length) = exp
            .cfg
            .workload
            .spec()
            .map(|s| (s.min_length, s.max_length))
            .unwrap_or((config::default_min(), config::default_max()));
        exp.cfg.workload = match kind {
            SpecKind::Lognormal => WorkloadConfig::Lognormal {
                sigma: pick(&args.sigma, 0, "sigma")?,
                mean: pick(&args.mean, 0, "mean")?,
                min_length,
                max_length,
                count,
            },
            SpecKind::Bimodal => {
                if args.mean.len() != 2 {
                    return Err(CliError::Usage(
                        "a bimodal spec needs two --mean values".into(),
                    ));
                }
                WorkloadConfig::Bimodal {
                    first: (pick(&args.sigma, 0, "sigma")?, args.mean[0]),
                    second: (pick(&args.sigma, 1, "sigma")?, args.mean[1]),
                    min_length,
                    max_length,
                    count,
                }
            }
        };
    } else if !args.sigma.is_empty() || !args.mean.is_empty() {
        return Err(CliError::Usage("--sigma and --mean require --spec".into()));
    }
    if let Some(n) = args.count {
        exp.cfg.workload.set_count(n);
    }
    let mut spec = exp.cfg.workload.spec().ok_or_else(|| {
        CliError::Usage("gen-trace needs a generated workload, not a trace file".into())
    })?;
    if let Some(m) = args.min_length {
        spec.min_length = m;
    }
    if let Some(m) = args.max_length {
        spec.max_length = m;
    }
    let count = exp.cfg.workload.count().expect("generated workload");
    let trace = generate_trace(&spec, exp.cfg.workload_seed(), count)?;
    Ok(vec![write_atomic(
        &exp.output(TRACE_FILE),
        trace.to_jsonl().as_bytes(),
    )?])
}

fn schedule_cmd(exp: &Experiment) -> Result<Vec<PathBuf>, CliError> {
    let (s, sc) = exp.schedule()?;
    let file = ScheduleFile::new(&s, &sc);
    Ok(vec![write_atomic(
        &exp.output(SCHEDULE_FILE),
        to_json(&file)?.as_bytes(),
    )?])
}

fn plan_cmd(exp: &Experiment) -> Result<Vec<PathBuf>, CliError> {
    let (s, _) = exp.schedule()?;
    let file = PlanFile {
        scheduler: s.scheduler,
        chosen: s.chosen,
        plan: s.plan,
    };
    Ok(vec![write_atomic(
        &exp.output(PLAN_FILE),
        to_json(&file)?.as_bytes(),
    )?])
}

fn simulate_cmd(exp: &Experiment) -> Result<Vec<PathBuf>, CliError> {
    let (s, sc) = exp.schedule()?;
    let report = s.simulate(&sc)?;
    log::info!("total time {:.6e} s", report.total_time);
    let json = to_json(&report)?;
    let timeline = report.timeline_csv()?;
    Ok(vec![
        write_atomic(&exp.output(REPORT_FILE), json.as_bytes())?,
        write_atomic(&exp.output(TIMELINE_FILE), timeline.as_bytes())?,
    ])
}

fn sweep_cmd(args: &SweepArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut exp = Experiment::load(&args.common)?;
    let sweep = &mut exp.cfg.sweep;
    if !args.worker_counts.is_empty() {
        sweep.worker_counts = args.worker_counts.clone();
    }
    if !args.block_sizes.is_empty() {
        sweep.block_sizes = args.block_sizes.clone();
    }
    if !args.schedulers.is_empty() {
        sweep.schedulers = args.schedulers.clone();
    }
    if let Some(t) = args.trials {
        sweep.trials = t;
    }
    let sweep = exp.cfg.sweep_config()?;
    let base = exp.cfg.schedule_config()?;
    let workload = exp.cfg.workload.resolve(&exp.base_dir)?;
    let rows = weak_scaling_sweep(&sweep, &workload, &base)?;
    Ok(vec![write_atomic(
        &exp.output(SWEEP_FILE),
        sweep_csv(&rows)?.as_bytes(),
    )?])
}

fn compare_cmd(args: &CompareArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.schedulers.len() < 2 {
        return Err(CliError::Usage(
            "compare needs at least two schedulers".into(),
        ));
    }
    let exp = Experiment::load(&args.common)?;
    let (batch, sc) = exp.batch()?;
    let seed = exp.cfg.workload_seed();
    let rows = args
        .schedulers
        .iter()
        .map(|&kind| measure(kind, &batch, &sc, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(vec![write_atomic(
        &exp.output(COMPARE_FILE),
        sweep_csv(&rows)?.as_bytes(),
    )?])
}

/// Runs one command and returns the files it wrote.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    match &cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Schedule(a) => schedule_cmd(&run_args(a)?),
        Command::Plan(a) => plan_cmd(&run_args(a)?),
        Command::Simulate(a) => simulate_cmd(&run_args(a)?),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<Vec<PathBuf>, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    execute(&cli)
}
