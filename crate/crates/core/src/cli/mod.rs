//! The `memcompose` command line.
//!
//! Exit codes: 0 success, 1 user error, 2 environment or composition error,
//! 3 workload failure.

pub mod experiments;
pub mod output;
pub mod report;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::emulator::{apply_composition, Composition, EmulatorError};
use crate::metrics::{aggregate, derive_with, write_series_csv, ColdNormalization};
use crate::probes::{self, ChaseConfig, ProbeError, ProbeResult, TriadConfig};
use crate::procfs::{NodeId, ProcfsError};
use crate::supervisor::{Basis, Job, PatternSyntax, Profile, SamplingMode, SamplingPlan, SpawnError, SupervisorError};
use crate::topology::{parse_size_suffix, Topology};
use crate::workload;
use experiments::{ExperimentError, ExperimentSpec, Sweep, WorkloadSpec};
use output::{append_json_line, create_file, default_output_dir, OutputDir, OutputError, OutputHeader};
use report::ReportError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_ENVIRONMENT: i32 = 2;
pub const EXIT_WORKLOAD: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Environment(String),
    #[error("{0}")]
    Workload(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Environment(_) => EXIT_ENVIRONMENT,
            CliError::Workload(_) => EXIT_WORKLOAD,
        }
    }
}

impl From<SupervisorError> for CliError {
    fn from(e: SupervisorError) -> Self {
        let m = e.to_string();
        match e {
            SupervisorError::SpawnFailure(SpawnError::Policy(_) | SpawnError::Os(_)) => CliError::Environment(m),
            SupervisorError::SpawnFailure(_) | SupervisorError::BadPattern(_) | SupervisorError::BadPlan(_) => {
                CliError::User(m)
            }
            SupervisorError::ChildNeverStopped { .. } => CliError::Workload(m),
            SupervisorError::Composition(_) | SupervisorError::Procfs(_) | SupervisorError::Os(_) => {
                CliError::Environment(m)
            }
        }
    }
}

impl From<EmulatorError> for CliError {
    fn from(e: EmulatorError) -> Self {
        match e {
            EmulatorError::Invalid(m) => CliError::User(format!("invalid composition: {m}")),
            other => CliError::Environment(other.to_string()),
        }
    }
}

impl From<OutputError> for CliError {
    fn from(e: OutputError) -> Self {
        match e {
            OutputError::Exists(_) => CliError::User(e.to_string()),
            OutputError::Io { .. } => CliError::Environment(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Spec(m) => CliError::User(m),
            ExperimentError::Supervisor(s) => s.into(),
            ExperimentError::Composition(c) => c.into(),
            ExperimentError::Output(o) => o.into(),
            ExperimentError::Workload(m) => CliError::Workload(m),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Composition(c) => c.into(),
            ProbeError::Invalid(m) => CliError::User(m),
            other => CliError::Environment(other.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Output(o) => o.into(),
            other => CliError::User(other.to_string()),
        }
    }
}

fn env_err(e: impl std::fmt::Display) -> CliError {
    CliError::Environment(e.to_string())
}

/// Parses `1G`, `512MiB`, `4096` and the like into bytes.
pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let t = t.strip_suffix("iB").or_else(|| t.strip_suffix('B')).unwrap_or(t);
    let (t, mult) = match t.strip_suffix(['T', 't']) {
        Some(r) => (r, 1u64 << 40),
        None => (t, 1),
    };
    parse_size_suffix(t)
        .and_then(|v| v.checked_mul(mult))
        .ok_or_else(|| format!("invalid size {s:?}; expected e.g. 4096, 64K, 512M, 1G"))
}

fn parse_secs(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("invalid duration {s:?}; expected seconds")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "memcompose", version, about = "Profile memory usage and emulate pooled memory on NUMA hosts")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the host NUMA topology as JSON.
    Topology,
    /// Run a workload and record its memory profile.
    Profile(ProfileArgs),
    /// Compute capacity, cold-page and bandwidth metrics from profiles.
    Derive(DeriveArgs),
    /// Time a workload at increasing pooled-memory fractions and classify it.
    SweepCapacity(SweepArgs),
    /// Time a workload interleaved over an increasing number of pool nodes.
    ScaleLinks(ScaleArgs),
    /// Time a workload sharing one pool with co-runners on other hosts.
    Sharing(SharingArgs),
    /// Measure bandwidth or latency of a composition.
    Probe(ProbeArgs),
    /// Render CSV tables and SVG charts from profiles and reports.
    Report(ReportArgs),
    /// Synthetic workloads with known memory behaviour.
    #[command(subcommand)]
    Synth(Synth),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Timer,
    Interrupt,
    Output,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    LocalOnly,
    RemoteOnly,
    CapacitySplit,
    Interleave,
    SharedPool,
}

/// Composition flags shared by `profile` and `probe`.
#[derive(Debug, Clone, Args)]
pub struct CompositionArgs {
    /// Composition file (TOML or JSON); overrides the other composition flags.
    #[arg(long, value_name = "FILE")]
    pub composition: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Local node; defaults to the first memory node with CPUs.
    #[arg(long)]
    pub local: Option<NodeId>,
    /// Pool node(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pool: Vec<NodeId>,
    /// Pooled fraction for capacity-split.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Peak footprint for capacity-split, e.g. 8G.
    #[arg(long, value_parser = parse_bytes)]
    pub peak: Option<u64>,
    /// Leave local memory out of the interleave set.
    #[arg(long)]
    pub exclude_local: bool,
}

impl CompositionArgs {
    fn resolve(&self, topo: &Topology) -> Result<Option<Composition>, CliError> {
        if let Some(path) = &self.composition {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
            let c: Composition = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?
            } else {
                toml::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?
            };
            c.validate()?;
            return Ok(Some(c));
        }
        let Some(kind) = self.kind else {
            return Ok(None);
        };
        let local = match self.local {
            Some(l) => l,
            None => default_local(topo)?,
        };
        let pools = if self.pool.is_empty() {
            topo.memory_nodes().into_iter().filter(|&n| n != local).take(1).collect()
        } else {
            self.pool.clone()
        };
        let first_pool = || {
            pools.first().copied().ok_or_else(|| {
                CliError::Environment(format!(
                    "composition unsatisfiable: no pool node besides local node {local} (host has {} memory nodes)",
                    topo.memory_nodes().len()
                ))
            })
        };
        let c = match kind {
            KindArg::LocalOnly => Composition::local_only(local),
            KindArg::RemoteOnly => Composition::remote_only(local, first_pool()?),
            KindArg::CapacitySplit => {
                let f = self.fraction.ok_or_else(|| CliError::User("capacity-split needs --fraction".into()))?;
                let peak = self.peak.ok_or_else(|| CliError::User("capacity-split needs --peak".into()))?;
                Composition::capacity_split(local, first_pool()?, f, peak)
            }
            KindArg::Interleave => {
                first_pool()?;
                Composition::interleave(local, pools.clone(), !self.exclude_local)
            }
            KindArg::SharedPool => {
                let mut c = Composition::shared_pool(local, first_pool()?);
                c.pooled_fraction = self.fraction;
                c.peak_usage_bytes = self.peak;
                c
            }
        };
        c.validate()?;
        Ok(Some(c))
    }
}

fn default_local(topo: &Topology) -> Result<NodeId, CliError> {
    topo.memory_nodes()
        .into_iter()
        .find(|n| topo.node(*n).is_some_and(|i| !i.cpus.is_empty()))
        .ok_or_else(|| CliError::Environment("no memory node with CPUs".into()))
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, value_enum, default_value = "timer")]
    pub mode: ModeArg,
    /// Sampling period in seconds (timer mode).
    #[arg(long, default_value = "1.0", value_parser = parse_secs)]
    pub period: f64,
    /// Output line that triggers a sample (output mode).
    #[arg(long)]
    pub pattern: Option<String>,
    /// Treat --pattern as a regular expression instead of a substring.
    #[arg(long)]
    pub regex: bool,
    /// Sample only MPI rank 0 of a launcher command.
    #[arg(long)]
    pub rank0: bool,
    /// Sample every rank of a launcher command.
    #[arg(long, conflicts_with = "rank0")]
    pub all_processes: bool,
    /// Interrupt mode: fail if the workload has not stopped itself in time.
    #[arg(long, value_parser = parse_secs)]
    pub stop_timeout: Option<f64>,
    /// Skip numa_maps reads.
    #[arg(long)]
    pub no_node_pages: bool,
    #[command(flatten)]
    pub composition: CompositionArgs,
    /// Profile file; defaults to profile.jsonl in the output directory.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
    #[arg(required = true, last = true, value_name = "COMMAND")]
    pub command: Vec<OsString>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BasisArg {
    Rss,
    Pss,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ColdNormArg {
    Final,
    Peak,
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    /// Profile files; several are aggregated into one job first.
    #[arg(required = true)]
    pub profiles: Vec<PathBuf>,
    /// Per-process quantity summed when aggregating.
    #[arg(long, value_enum, default_value = "rss")]
    pub basis: BasisArg,
    /// Alignment tolerance in seconds; defaults to the sampling period.
    #[arg(long, value_parser = parse_secs)]
    pub tolerance: Option<f64>,
    #[arg(long, value_enum, default_value = "final")]
    pub cold_norm: ColdNormArg,
    /// Metrics JSON file; printed to stdout when omitted.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Per-interval series CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// Flags shared by the experiment subcommands.
#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment file (TOML or JSON); command-line flags are ignored.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = experiments::DEFAULT_REPETITIONS)]
    pub repetitions: u32,
    #[arg(long)]
    pub local: Option<NodeId>,
    #[arg(long)]
    pub pool: Option<NodeId>,
    /// Sampling period in seconds for the timed runs.
    #[arg(long, default_value = "1.0", value_parser = parse_secs)]
    pub period: f64,
    /// Defaults to $MEMCOMPOSE_OUTPUT_DIR, else ./memcompose-out.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Workload command.
    #[arg(last = true, value_name = "COMMAND")]
    pub command: Vec<String>,
}

impl ExperimentArgs {
    fn spec(&self, sweep: Sweep) -> Result<ExperimentSpec, CliError> {
        if let Some(path) = &self.spec {
            let mut s = ExperimentSpec::load(path)?;
            if let Some(d) = &self.output_dir {
                s.output_dir = d.clone();
            }
            return Ok(s);
        }
        if self.command.is_empty() {
            return Err(CliError::User("no workload command given (pass it after --, or use --spec)".into()));
        }
        let mut s = ExperimentSpec::new(WorkloadSpec::new(self.command.clone()), sweep);
        s.repetitions = self.repetitions;
        s.local_node = self.local;
        s.pool_node = self.pool;
        s.sample_period_secs = self.period;
        s.output_dir = self.output_dir.clone().unwrap_or_else(default_output_dir);
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Pooled fractions, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = experiments::DEFAULT_FRACTIONS)]
    pub fractions: Vec<f64>,
    /// Peak footprint; a local-only calibration run measures it when omitted.
    #[arg(long, value_parser = parse_bytes)]
    pub peak: Option<u64>,
    /// Slowdown below which a workload is class I.
    #[arg(long, default_value_t = 0.05)]
    pub t1: f64,
    /// Slowdown above which a workload is class III.
    #[arg(long, default_value_t = 0.20)]
    pub t2: f64,
    #[command(flatten)]
    pub common: ExperimentArgs,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    #[arg(long)]
    pub max_links: Option<u32>,
    #[arg(long)]
    pub exclude_local: bool,
    #[command(flatten)]
    pub common: ExperimentArgs,
}

#[derive(Debug, Args)]
pub struct SharingArgs {
    /// Hosts sharing the pool, including the subject's.
    #[arg(long)]
    pub hosts: usize,
    /// Co-runner command line, split on whitespace; repeat for several.
    #[arg(long = "co-runner")]
    pub co_runners: Vec<String>,
    /// Label for the co-runner mix, e.g. same or other.
    #[arg(long)]
    pub label: Option<String>,
    /// Run each co-runner once instead of restarting it until the subject ends.
    #[arg(long)]
    pub no_relaunch: bool,
    #[command(flatten)]
    pub common: ExperimentArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProbeKindArg {
    Triad,
    Chase,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(value_enum, id = "probe", value_name = "PROBE")]
    pub kind: ProbeKindArg,
    #[command(flatten)]
    pub composition: CompositionArgs,
    /// Defaults to 1G for chase and max(1G, 4 x LLC) for triad.
    #[arg(long, value_parser = parse_bytes)]
    pub working_set: Option<u64>,
    /// Triad threads; defaults to the CPUs of the local node.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Chase permutation seed; random when omitted (always recorded).
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON-lines file the result is appended to; defaults to probes.jsonl
    /// in the output directory.
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Synth {
    /// Touch distinct pages at a fixed rate.
    Touch {
        #[arg(long, value_parser = parse_bytes)]
        footprint: u64,
        /// Bytes of distinct pages touched per second.
        #[arg(long, value_parser = parse_bytes)]
        rate: u64,
        #[arg(long, value_parser = parse_secs)]
        seconds: f64,
    },
    /// Grow the footprint stepwise.
    Grow {
        #[arg(long, value_parser = parse_bytes)]
        step: u64,
        #[arg(long)]
        steps: usize,
        #[arg(long, value_parser = parse_secs, default_value = "1")]
        interval: f64,
    },
    /// Initialise, then touch a fraction of the footprint; self-stops at
    /// both region boundaries when supervised.
    Phases {
        #[arg(long, value_parser = parse_bytes)]
        footprint: u64,
        #[arg(long)]
        fraction: f64,
        #[arg(long, value_parser = parse_secs, default_value = "1")]
        compute: f64,
    },
    /// Print `STEP k` after touching each new chunk.
    Steps {
        #[arg(long)]
        count: usize,
        #[arg(long, value_parser = parse_bytes)]
        chunk: u64,
        #[arg(long, value_parser = parse_secs, default_value = "0.5")]
        hold: f64,
    },
    /// CPU-bound fixed work.
    Spin {
        #[arg(long)]
        iterations: u64,
    },
    /// Triad-like streaming over three arrays.
    Stream {
        #[arg(long, value_parser = parse_bytes)]
        bytes: u64,
        #[arg(long)]
        passes: usize,
    },
    /// Map a shared file, touch all of it, and hold.
    Shared {
        #[arg(long)]
        path: PathBuf,
        #[arg(long, value_parser = parse_bytes)]
        bytes: u64,
        #[arg(long, value_parser = parse_secs, default_value = "1")]
        hold: f64,
    },
    Sleep {
        #[arg(long, value_parser = parse_secs)]
        seconds: f64,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("memcompose: {e}");
            e.exit_code()
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(env_err)?;
    writeln!(out).map_err(env_err)
}

fn dispatch(cmd: Command) -> Result<i32, CliError> {
    match cmd {
        Command::Topology => {
            print_json(&Topology::discover())?;
            Ok(EXIT_OK)
        }
        Command::Profile(a) => cmd_profile(a),
        Command::Derive(a) => cmd_derive(a),
        Command::SweepCapacity(a) => {
            let mut s = a.common.spec(Sweep::CapacityFractions {
                fractions: a.fractions.clone(),
            })?;
            if a.common.spec.is_none() {
                s.peak_usage_bytes = a.peak;
                s.thresholds = crate::metrics::Thresholds { t1: a.t1, t2: a.t2 };
                s.validate()?;
            }
            let r = experiments::cmd_sweep_capacity(&s, a.common.force)?;
            print_json(&r)?;
            let base = r.baseline().map(|p| p.status);
            Ok(match base {
                Some(experiments::PointStatus::Ok) | None => EXIT_OK,
                Some(experiments::PointStatus::Skipped) => EXIT_ENVIRONMENT,
                Some(experiments::PointStatus::Failed) => EXIT_WORKLOAD,
            })
        }
        Command::ScaleLinks(a) => {
            let s = a.common.spec(Sweep::LinkScaling {
                max_links: a.max_links,
                include_local: !a.exclude_local,
            })?;
            print_json(&experiments::cmd_scale_links(&s, a.common.force)?)?;
            Ok(EXIT_OK)
        }
        Command::Sharing(a) => {
            let co: Vec<Vec<String>> = a
                .co_runners
                .iter()
                .map(|c| c.split_whitespace().map(String::from).collect())
                .collect();
            let s = a.common.spec(Sweep::Sharing {
                hosts: a.hosts,
                co_runners: co,
                label: a.label.clone(),
                relaunch_co_runners: !a.no_relaunch,
            })?;
            print_json(&experiments::cmd_sharing(&s, a.common.force)?)?;
            Ok(EXIT_OK)
        }
        Command::Probe(a) => cmd_probe(a),
        Command::Report(a) => {
            let out = OutputDir::new(a.output_dir.unwrap_or_else(default_output_dir), a.force);
            let r = report::cmd_report(&a.inputs, &out)?;
            print!("{}", r.summary);
            for f in &r.files {
                println!("wrote {}", f.display());
            }
            Ok(EXIT_OK)
        }
        Command::Synth(s) => run_synth(s),
    }
}

fn numbered(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("profile");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("jsonl");
    path.with_file_name(format!("{stem}.{i}.{ext}"))
}

fn write_profile(path: &Path, p: &Profile, force: bool) -> Result<(), CliError> {
    let w = create_file(path, force)?;
    p.write_jsonl(w).map_err(env_err)
}

fn cmd_profile(a: ProfileArgs) -> Result<i32, CliError> {
    let mut plan = match a.mode {
        ModeArg::Timer => SamplingPlan::timer(a.period),
        ModeArg::Interrupt => SamplingPlan::interrupt(),
        ModeArg::Output => {
            let p = a.pattern.clone().ok_or_else(|| CliError::User("output mode needs --pattern".into()))?;
            let mut plan = SamplingPlan::output(p, if a.regex { PatternSyntax::Regex } else { PatternSyntax::Substring });
            plan.period_secs = a.period;
            plan
        }
    };
    if a.pattern.is_some() && plan.mode != SamplingMode::OutputInterrupt {
        return Err(CliError::User("--pattern is only valid with --mode output".into()));
    }
    plan.rank0_only = a.rank0;
    plan.sample_all_processes = a.all_processes;
    plan.stop_timeout_secs = a.stop_timeout;
    plan.node_pages = !a.no_node_pages;
    plan.validate().map_err(CliError::User)?;

    let path = a.output.clone().unwrap_or_else(|| default_output_dir().join("profile.jsonl"));
    if path.exists() && !a.force {
        return Err(OutputError::Exists(path).into());
    }
    let topo = Topology::discover();
    let composition = a.composition.resolve(&topo)?;
    let active = composition.as_ref().map(|c| apply_composition(c, &topo)).transpose()?;
    let mut job = Job::new([a.command.iter()], plan);
    if let Some(act) = &active {
        job = job.policy(act.launch_policy()).composition(act.composition.clone());
    }
    let profiles = match job.run() {
        Ok(p) => p,
        Err(SupervisorError::ChildNeverStopped { pid, timeout_secs, profile }) => {
            let mut p = *profile;
            p.topology = Some(topo);
            write_profile(&path, &p, a.force)?;
            return Err(CliError::Workload(format!(
                "child {pid} never stopped within {timeout_secs} s; partial profile in {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    drop(active);
    let mut crashed = None;
    let many = profiles.len() > 1;
    for (i, mut p) in profiles.into_iter().enumerate() {
        p.topology = Some(topo.clone());
        let target = if many { numbered(&path, i) } else { path.clone() };
        write_profile(&target, &p, a.force)?;
        eprintln!(
            "wrote {} ({} snapshots, exit {})",
            target.display(),
            p.snapshots.len(),
            p.exit_status
        );
        if p.crashed && crashed.is_none() {
            crashed = Some(p.exit_status);
        }
    }
    match crashed {
        Some(s) => Err(CliError::Workload(format!("workload exited with status {s}"))),
        None => Ok(EXIT_OK),
    }
}

fn cmd_derive(a: DeriveArgs) -> Result<i32, CliError> {
    let profiles = a
        .profiles
        .iter()
        .map(|p| {
            let f = File::open(p).map_err(|e| CliError::User(format!("{}: {e}", p.display())))?;
            Profile::read_jsonl(BufReader::new(f)).map_err(|e| CliError::User(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let basis = match a.basis {
        BasisArg::Rss => Basis::Rss,
        BasisArg::Pss => Basis::Pss,
    };
    let tolerance = a.tolerance.unwrap_or_else(|| profiles.first().map_or(1.0, |p| p.plan.period_secs));
    let job = aggregate(&profiles, basis, tolerance).map_err(|e| CliError::User(e.to_string()))?;
    let norm = match a.cold_norm {
        ColdNormArg::Final => ColdNormalization::FinalRss,
        ColdNormArg::Peak => ColdNormalization::PeakRss,
    };
    let m = derive_with(&job, norm).map_err(|e| CliError::User(e.to_string()))?;
    #[derive(Serialize)]
    struct Out<'a> {
        header: OutputHeader,
        inputs: &'a [PathBuf],
        metrics: &'a crate::metrics::DerivedMetrics,
    }
    let topo = job.topology.clone().unwrap_or_else(Topology::discover);
    let doc = Out {
        header: OutputHeader::new(topo),
        inputs: &a.profiles,
        metrics: &m,
    };
    match &a.output {
        Some(path) => {
            let mut w = create_file(path, a.force)?;
            serde_json::to_writer_pretty(&mut w, &doc).map_err(env_err)?;
            writeln!(w).map_err(env_err)?;
        }
        None => print_json(&doc)?,
    }
    if let Some(path) = &a.csv {
        let mut w = create_file(path, a.force)?;
        w.write_all(doc.header.csv_comment().as_bytes()).map_err(env_err)?;
        write_series_csv(&m, w).map_err(env_err)?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ProbeRow<'a> {
    header: OutputHeader,
    result: &'a ProbeResult,
}

fn cmd_probe(a: ProbeArgs) -> Result<i32, CliError> {
    let topo = Topology::discover();
    let c = match a.composition.resolve(&topo)? {
        Some(c) => c,
        None => Composition::local_only(default_local(&topo)?),
    };
    let active = apply_composition(&c, &topo)?;
    let result = match a.kind {
        ProbeKindArg::Triad => {
            let ws = a.working_set.unwrap_or_else(|| (1u64 << 30).max(4 * topo.llc_bytes.unwrap_or(0)));
            let threads = a.threads.unwrap_or_else(|| {
                topo.node(c.cpu_binding).map_or(1, |n| n.cpus.len().max(1))
            });
            let mut cfg = TriadConfig::new(ws, threads);
            if let Some(r) = a.repetitions {
                cfg.repetitions = r;
            }
            probes::triad(&active, &cfg)?
        }
        ProbeKindArg::Chase => {
            let seed = a.seed.unwrap_or_else(rand::random);
            let mut cfg = ChaseConfig::new(a.working_set.unwrap_or(probes::DEFAULT_CHASE_WORKING_SET), seed, topo.llc_bytes);
            if let Some(r) = a.repetitions {
                cfg.repetitions = r;
            }
            probes::chase(&active, &cfg)?
        }
    };
    drop(active);
    let mut header = OutputHeader::new(topo);
    if let Some(s) = result.seed {
        header = header.with_seed(s);
    }
    let row = ProbeRow { header, result: &result };
    let results = a.results.unwrap_or_else(|| default_output_dir().join("probes.jsonl"));
    append_json_line(&results, &row)?;
    print_json(&result)?;
    if !result.valid {
        eprintln!("memcompose: probe flagged invalid: {}", result.notes.join("; "));
    }
    Ok(EXIT_OK)
}

fn run_synth(s: Synth) -> Result<i32, CliError> {
    let secs = Duration::from_secs_f64;
    let usize_of = |b: u64| usize::try_from(b).map_err(|_| CliError::User(format!("{b} bytes is too large")));
    let r = match s {
        Synth::Touch { footprint, rate, seconds } => workload::touch_rate(usize_of(footprint)?, rate, secs(seconds)),
        Synth::Grow { step, steps, interval } => workload::grow(usize_of(step)?, steps, secs(interval)),
        Synth::Phases {
            footprint,
            fraction,
            compute,
        } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(CliError::User(format!("fraction {fraction} is outside [0, 1]")));
            }
            workload::phases(usize_of(footprint)?, fraction, secs(compute))
        }
        Synth::Steps { count, chunk, hold } => workload::steps(count, usize_of(chunk)?, secs(hold)),
        Synth::Spin { iterations } => {
            println!("{}", workload::spin(iterations));
            Ok(())
        }
        Synth::Stream { bytes, passes } => {
            let t = workload::stream(usize_of(bytes)?, passes);
            println!("stream {t:.6} s");
            Ok(())
        }
        Synth::Shared { path, bytes, hold } => workload::shared(&path, usize_of(bytes)?, secs(hold)),
        Synth::Sleep { seconds } => {
            std::thread::sleep(secs(seconds));
            Ok(())
        }
    };
    r.map_err(|e| CliError::Workload(e.to_string()))?;
    Ok(EXIT_OK)
}

impl From<ProcfsError> for CliError {
    fn from(e: ProcfsError) -> Self {
        CliError::Environment(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::CompositionKind;

    #[test]
    fn command_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_bytes("4096"), Ok(4096));
        assert_eq!(parse_bytes("64K"), Ok(64 << 10));
        assert_eq!(parse_bytes("512MiB"), Ok(512 << 20));
        assert_eq!(parse_bytes("1G"), Ok(1 << 30));
        assert_eq!(parse_bytes("2GB"), Ok(2 << 30));
        assert_eq!(parse_bytes("1T"), Ok(1 << 40));
        assert!(parse_bytes("lots").is_err());
        assert!(parse_bytes("").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["memcompose", "report"]), EXIT_USER);
        assert_eq!(run(["memcompose", "no-such-command"]), EXIT_USER);
        assert_eq!(run(["memcompose", "profile", "--period", "x", "--", "true"]), EXIT_USER);
        assert_eq!(run(["memcompose", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_program_is_a_user_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("p.jsonl");
        let code = run([
            "memcompose",
            "profile",
            "-o",
            out.to_str().unwrap(),
            "--",
            "/nonexistent/program",
        ]);
        assert_eq!(code, EXIT_USER);
    }

    #[test]
    fn crash_exits_three_and_keeps_profile() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("p.jsonl");
        let o = out.to_str().unwrap();
        assert_eq!(run(["memcompose", "profile", "--period", "0.1", "-o", o, "--", "sh", "-c", "exit 4"]), EXIT_WORKLOAD);
        let p = Profile::read_jsonl(BufReader::new(File::open(&out).unwrap())).unwrap();
        assert_eq!(p.exit_status, 4);
        // No silent overwrite.
        assert_eq!(run(["memcompose", "profile", "-o", o, "--", "true"]), EXIT_USER);
        assert_eq!(run(["memcompose", "profile", "--force", "-o", o, "--", "true"]), EXIT_OK);
    }

    #[test]
    fn unsatisfiable_composition_exits_two() {
        if Topology::discover().memory_nodes().len() > 1 {
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("p.jsonl");
        let code = run([
            "memcompose",
            "profile",
            "--kind",
            "remote-only",
            "-o",
            out.to_str().unwrap(),
            "--",
            "true",
        ]);
        assert_eq!(code, EXIT_ENVIRONMENT);
    }

    #[test]
    fn composition_flags() {
        let topo = Topology::synthetic(3, 2, 1 << 30);
        let mut args = CompositionArgs {
            composition: None,
            kind: Some(KindArg::Interleave),
            local: Some(0),
            pool: vec![1, 2],
            fraction: None,
            peak: None,
            exclude_local: true,
        };
        let c = args.resolve(&topo).unwrap().unwrap();
        assert_eq!(c.interleave_set(), vec![1, 2]);
        args.kind = Some(KindArg::CapacitySplit);
        assert!(matches!(args.resolve(&topo), Err(CliError::User(_))));
        args.fraction = Some(0.5);
        args.peak = Some(1 << 30);
        assert_eq!(args.resolve(&topo).unwrap().unwrap().kind, CompositionKind::CapacitySplit);
        args.kind = None;
        assert!(args.resolve(&topo).unwrap().is_none());
    }
}
