//! Experiment orchestration: capacity sweeps, link scaling and pool sharing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::output::{default_output_dir, OutputDir, OutputError, OutputHeader};
use crate::emulator::{apply_composition, plan_sharing, ActiveComposition, Composition, EmulatorError};
use crate::metrics::{classify, MetricsError, SensitivityClass, SensitivityReport, Thresholds, CLASSIFY_FRACTION};
use crate::procfs::NodeId;
use crate::supervisor::{Job, Profile, SamplingPlan, SupervisorError};
use crate::topology::Topology;

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_REPETITIONS: u32 = 3;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error(transparent)]
    Supervisor(#[from] SupervisorError),
    #[error(transparent)]
    Composition(#[from] EmulatorError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("workload failed: {0}")]
    Workload(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub argv: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env: BTreeMap<String, String>,
}

impl WorkloadSpec {
    pub fn new(argv: Vec<String>) -> Self {
        WorkloadSpec {
            argv,
            env: BTreeMap::new(),
        }
    }
}

fn default_fractions() -> Vec<f64> {
    DEFAULT_FRACTIONS.to_vec()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sweep {
    CapacityFractions {
        #[serde(default = "default_fractions")]
        fractions: Vec<f64>,
    },
    LinkScaling {
        /// Defaults to every memory node other than the local one.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_links: Option<u32>,
        #[serde(default = "default_true")]
        include_local: bool,
    },
    Sharing {
        hosts: usize,
        #[serde(default)]
        co_runners: Vec<Vec<String>>,
        /// Free-form mix label, e.g. `same` or `other`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        /// Restart co-runners that finish before the subject.
        #[serde(default = "default_true")]
        relaunch_co_runners: bool,
    },
}

fn default_repetitions() -> u32 {
    DEFAULT_REPETITIONS
}

fn default_period() -> f64 {
    1.0
}

/// A complete experiment, loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub workload: WorkloadSpec,
    pub sweep: Sweep,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_node: Option<NodeId>,
    /// Skips the calibration run of a capacity sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_usage_bytes: Option<u64>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_period")]
    pub sample_period_secs: f64,
}

impl ExperimentSpec {
    pub fn new(workload: WorkloadSpec, sweep: Sweep) -> Self {
        ExperimentSpec {
            workload,
            sweep,
            repetitions: DEFAULT_REPETITIONS,
            output_dir: default_output_dir(),
            local_node: None,
            pool_node: None,
            peak_usage_bytes: None,
            thresholds: Thresholds::default(),
            sample_period_secs: 1.0,
        }
    }

    /// JSON when the extension is `.json`, TOML otherwise.
    pub fn load(path: &Path) -> Result<ExperimentSpec, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Spec(format!("{}: {e}", path.display())))?;
        let spec: ExperimentSpec = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ExperimentError::Spec(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| ExperimentError::Spec(e.to_string()))?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Spec(m));
        if self.workload.argv.is_empty() {
            return bad("workload command is empty".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if !(self.sample_period_secs > 0.0) {
            return bad(format!("sample period must be > 0, got {}", self.sample_period_secs));
        }
        let th = self.thresholds;
        if !(0.0 <= th.t1 && th.t1 <= th.t2) {
            return bad(format!("thresholds must satisfy 0 <= t1 <= t2, got ({}, {})", th.t1, th.t2));
        }
        match &self.sweep {
            Sweep::CapacityFractions { fractions } => {
                if fractions.is_empty() {
                    return bad("no fractions given".into());
                }
                if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
                    return bad(format!("fraction {f} is outside [0, 1]"));
                }
            }
            Sweep::LinkScaling { .. } => {}
            Sweep::Sharing { hosts, co_runners, .. } => {
                if *hosts == 0 {
                    return bad("sharing needs at least one host".into());
                }
                if *hosts > 1 && co_runners.is_empty() {
                    return bad("sharing with more than one host needs co-runner commands".into());
                }
                if co_runners.iter().any(|c| c.is_empty()) {
                    return bad("empty co-runner command".into());
                }
            }
        }
        Ok(())
    }

    fn plan(&self) -> SamplingPlan {
        SamplingPlan::timer(self.sample_period_secs)
    }

    fn out(&self, force: bool) -> OutputDir {
        OutputDir::new(&self.output_dir, force)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Ok,
    /// The composition cannot be built on this host.
    Skipped,
    /// The workload crashed or exited nonzero.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repetition: u32,
    pub seconds: f64,
    pub exit_status: i32,
    pub crashed: bool,
    pub profile_file: PathBuf,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Launches `w` under `active`, waiting on `gate` when given.
fn run_workload(
    w: &WorkloadSpec,
    plan: &SamplingPlan,
    active: Option<&ActiveComposition>,
    gate: Option<Arc<Barrier>>,
    topo: &Topology,
) -> Result<Profile, SupervisorError> {
    let mut job = Job::new([w.argv.iter()], plan.clone());
    for (k, v) in &w.env {
        job = job.env(k, v);
    }
    if let Some(a) = active {
        job = job.policy(a.launch_policy()).composition(a.composition.clone());
    }
    if let Some(g) = gate {
        job = job.gate(g);
    }
    let mut p = job
        .run()?
        .into_iter()
        .next()
        .ok_or_else(|| SupervisorError::BadPlan("no process was sampled".into()))?;
    p.topology = Some(topo.clone());
    Ok(p)
}

fn save_profile(out: &OutputDir, name: &str, p: &Profile) -> Result<PathBuf, ExperimentError> {
    let (path, w) = out.create(name)?;
    p.write_jsonl(w).map_err(|source| OutputError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Runs `c` `reps` times; `Ok(None)` when the composition is unsatisfiable.
fn timed_runs(
    spec: &ExperimentSpec,
    c: &Composition,
    topo: &Topology,
    out: &OutputDir,
    prefix: &str,
) -> Result<Result<Vec<RunRecord>, String>, ExperimentError> {
    let mut runs = Vec::new();
    for rep in 1..=spec.repetitions {
        let active = match apply_composition(c, topo) {
            Ok(a) => a,
            Err(e @ EmulatorError::Unsatisfiable(_)) => return Ok(Err(e.to_string())),
            Err(e) => return Err(e.into()),
        };
        let p = run_workload(&spec.workload, &spec.plan(), Some(&active), None, topo)?;
        drop(active);
        let file = save_profile(out, &format!("{prefix}/rep{rep}.jsonl"), &p)?;
        info!("{prefix} rep {rep}: {:.3} s (exit {})", p.wall_time_secs, p.exit_status);
        runs.push(RunRecord {
            repetition: rep,
            seconds: p.wall_time_secs,
            exit_status: p.exit_status,
            crashed: p.crashed,
            profile_file: file,
        });
    }
    Ok(Ok(runs))
}

fn summarize(runs: Result<Vec<RunRecord>, String>) -> (PointStatus, Option<String>, Vec<RunRecord>, Option<f64>) {
    match runs {
        Err(reason) => (PointStatus::Skipped, Some(reason), Vec::new(), None),
        Ok(runs) if runs.iter().any(|r| r.crashed) => {
            let bad = runs.iter().find(|r| r.crashed).map(|r| r.exit_status).unwrap_or(0);
            (PointStatus::Failed, Some(format!("workload exited with status {bad}")), runs, None)
        }
        Ok(runs) => {
            let m = median(&runs.iter().map(|r| r.seconds).collect::<Vec<_>>());
            (PointStatus::Ok, None, runs, m)
        }
    }
}

fn pick_local(spec: &ExperimentSpec, topo: &Topology) -> Result<NodeId, ExperimentError> {
    match spec.local_node {
        Some(n) => Ok(n),
        None => topo
            .memory_nodes()
            .into_iter()
            .find(|n| topo.node(*n).is_some_and(|i| !i.cpus.is_empty()))
            .ok_or_else(|| EmulatorError::Unsatisfiable("no memory node with CPUs".into()).into()),
    }
}

/// Pool node: the given one, else the first memory node other than `local`.
fn pick_pool(spec: &ExperimentSpec, topo: &Topology, local: NodeId) -> Option<NodeId> {
    spec.pool_node
        .or_else(|| topo.memory_nodes().into_iter().find(|&n| n != local))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub composition: String,
    pub status: PointStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub runs: Vec<RunRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub header: OutputHeader,
    pub workload: WorkloadSpec,
    pub repetitions: u32,
    pub local_node: NodeId,
    /// `None` on hosts without a second memory node.
    pub pool_node: Option<NodeId>,
    pub peak_usage_bytes: u64,
    /// `given` or `calibrated`.
    pub peak_source: String,
    pub points: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<SensitivityClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_note: Option<String>,
}

impl SweepReport {
    pub fn baseline(&self) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.fraction == 0.0)
    }
}

pub const SWEEP_REPORT_FILE: &str = "sweep_report.json";

/// Runs the workload at each pooled fraction and classifies its sensitivity.
pub fn cmd_sweep_capacity(spec: &ExperimentSpec, force: bool) -> Result<SweepReport, ExperimentError> {
    spec.validate()?;
    let Sweep::CapacityFractions { fractions } = &spec.sweep else {
        return Err(ExperimentError::Spec("not a capacity sweep".into()));
    };
    let topo = Topology::discover();
    let local = pick_local(spec, &topo)?;
    let pool = pick_pool(spec, &topo, local);
    let out = spec.out(force);

    let (peak, peak_source) = match spec.peak_usage_bytes {
        Some(b) => (b, "given"),
        None => {
            info!("calibrating peak usage with a local-only run");
            let active = apply_composition(&Composition::local_only(local), &topo)?;
            let p = run_workload(&spec.workload, &spec.plan(), Some(&active), None, &topo)?;
            drop(active);
            save_profile(&out, "sweep/calibration.jsonl", &p)?;
            if p.crashed {
                return Err(ExperimentError::Workload(format!(
                    "calibration run exited with status {}",
                    p.exit_status
                )));
            }
            let kib = p.snapshots.iter().map(|s| s.rss_kib).max().unwrap_or(0);
            (kib * 1024, "calibrated")
        }
    };

    let mut points = Vec::new();
    for &f in fractions {
        let c = match pool {
            Some(pool) => Composition::for_fraction(local, pool, f, peak),
            None => Composition::for_fraction(local, local, f.min(0.0), peak),
        };
        let runs = if pool.is_none() && f > 0.0 {
            Err(EmulatorError::Unsatisfiable(format!(
                "pooled fraction {f:.2} needs a pool node besides local node {local}; host has {} memory node(s)",
                topo.memory_nodes().len()
            ))
            .to_string())
        } else {
            timed_runs(spec, &c, &topo, &out, &format!("sweep/f{f:.2}"))?
        };
        let label = match (pool, f) {
            (None, f) if f >= 1.0 => "RemoteOnly".to_string(),
            (None, f) if f > 0.0 => format!("capacity_split({f:.2})"),
            _ => c.label(),
        };
        let (status, reason, runs, median_seconds) = summarize(runs);
        if let Some(r) = &reason {
            warn!("fraction {f:.2}: {r}");
        }
        points.push(SweepPoint {
            fraction: f,
            composition: label,
            status,
            reason,
            runs,
            median_seconds,
        });
    }

    let mut report = SweepReport {
        header: OutputHeader::new(topo),
        workload: spec.workload.clone(),
        repetitions: spec.repetitions,
        local_node: local,
        pool_node: pool,
        peak_usage_bytes: peak,
        peak_source: peak_source.into(),
        points,
        sensitivity: None,
        class: None,
        class_note: None,
    };
    let baseline = report.baseline().and_then(|p| p.median_seconds).unwrap_or(0.0);
    let timed: Vec<(f64, f64)> = report
        .points
        .iter()
        .filter_map(|p| p.median_seconds.map(|s| (p.fraction, s)))
        .collect();
    match classify(baseline, &timed, spec.thresholds) {
        Ok(s) => {
            report.class = Some(s.class);
            report.sensitivity = Some(s);
        }
        Err(e @ (MetricsError::Missing75 | MetricsError::MissingBaseline(_))) => {
            let why = report
                .points
                .iter()
                .find(|p| p.fraction == if matches!(e, MetricsError::Missing75) { CLASSIFY_FRACTION } else { 0.0 })
                .and_then(|p| p.reason.clone());
            report.class_note = Some(match why {
                Some(w) => format!("not classified: {e} ({w})"),
                None => format!("not classified: {e}"),
            });
        }
        Err(e) => return Err(ExperimentError::Spec(e.to_string())),
    }
    out.write_json(SWEEP_REPORT_FILE, &report)?;
    out.write_text("sweep_report.csv", &sweep_csv(&report))?;
    Ok(report)
}

pub fn sweep_csv(r: &SweepReport) -> String {
    let mut w = csv::Writer::from_writer(r.header.csv_comment().into_bytes());
    let _ = w.write_record(["fraction", "composition", "status", "median_seconds", "slowdown", "class"]);
    for p in &r.points {
        let slowdown = r
            .sensitivity
            .as_ref()
            .and_then(|s| s.slowdown_by_fraction.iter().find(|t| t.fraction == p.fraction))
            .map(|t| format!("{:.4}", t.slowdown))
            .unwrap_or_default();
        let _ = w.write_record([
            format!("{:.2}", p.fraction),
            p.composition.clone(),
            format!("{:?}", p.status).to_lowercase(),
            p.median_seconds.map(|s| format!("{s:.4}")).unwrap_or_default(),
            slowdown,
            r.class.map(|c| format!("{c:?}")).unwrap_or_default(),
        ]);
    }
    String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub links: u32,
    pub composition: String,
    pub status: PointStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub runs: Vec<RunRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_seconds: Option<f64>,
    /// Local-only median over this point's median.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub header: OutputHeader,
    pub workload: WorkloadSpec,
    pub repetitions: u32,
    pub local_node: NodeId,
    pub include_local: bool,
    pub points: Vec<ScalingPoint>,
}

/// Runs the workload local-only and then interleaved over 1..=max links.
pub fn cmd_scale_links(spec: &ExperimentSpec, force: bool) -> Result<ScalingReport, ExperimentError> {
    spec.validate()?;
    let Sweep::LinkScaling { max_links, include_local } = &spec.sweep else {
        return Err(ExperimentError::Spec("not a link-scaling sweep".into()));
    };
    let topo = Topology::discover();
    let local = pick_local(spec, &topo)?;
    let pools: Vec<NodeId> = topo.memory_nodes().into_iter().filter(|&n| n != local).collect();
    if pools.is_empty() {
        return Err(EmulatorError::Unsatisfiable(format!(
            "link scaling needs memory nodes besides local node {local}; host has {}",
            topo.memory_nodes().len()
        ))
        .into());
    }
    let max = max_links.unwrap_or(pools.len() as u32);
    let out = spec.out(force);
    let mut points = Vec::new();
    for links in 0..=max {
        let c = if links == 0 {
            Composition::local_only(local)
        } else if (links as usize) <= pools.len() {
            let mut c = Composition::interleave(local, pools[..links as usize].to_vec(), *include_local);
            c.link_count = Some(links);
            c
        } else {
            points.push(ScalingPoint {
                links,
                composition: format!("interleave({links} links)"),
                status: PointStatus::Skipped,
                reason: Some(format!("only {} pool nodes available", pools.len())),
                runs: Vec::new(),
                median_seconds: None,
                speedup: None,
            });
            continue;
        };
        let runs = timed_runs(spec, &c, &topo, &out, &format!("links/l{links}"))?;
        let (status, reason, runs, median_seconds) = summarize(runs);
        points.push(ScalingPoint {
            links,
            composition: c.label(),
            status,
            reason,
            runs,
            median_seconds,
            speedup: None,
        });
    }
    if let Some(base) = points.first().and_then(|p| p.median_seconds) {
        for p in &mut points {
            p.speedup = p.median_seconds.map(|s| base / s);
        }
    }
    let report = ScalingReport {
        header: OutputHeader::new(topo),
        workload: spec.workload.clone(),
        repetitions: spec.repetitions,
        local_node: local,
        include_local: *include_local,
        points,
    };
    out.write_json("scaling_report.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingConfig {
    pub hosts: usize,
    /// `private` for one host, else `shared`.
    pub name: String,
    pub co_runners: Vec<Vec<String>>,
    pub status: PointStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub runs: Vec<RunRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_seconds: Option<f64>,
    /// Mean over the private mean, minus one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slowdown: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingReport {
    pub header: OutputHeader,
    pub workload: WorkloadSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub pool_node: NodeId,
    pub configurations: Vec<SharingConfig>,
}

fn stats(xs: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None, None);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (Some(mean), Some(min), Some(max))
}

/// One repetition of the subject on host 0 with `co_runners` on hosts 1..
fn sharing_run(
    spec: &ExperimentSpec,
    comps: &[Composition],
    co_runners: &[Vec<String>],
    relaunch: bool,
    topo: &Topology,
) -> Result<Profile, ExperimentError> {
    let actives = comps
        .iter()
        .map(|c| apply_composition(c, topo))
        .collect::<Result<Vec<_>, _>>()?;
    let gate = Arc::new(Barrier::new(comps.len()));
    let done = AtomicBool::new(false);
    let plan = spec.plan();
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for (i, active) in actives.iter().enumerate().skip(1) {
            let w = WorkloadSpec::new(co_runners[(i - 1) % co_runners.len()].clone());
            let (gate, done, plan) = (gate.clone(), &done, &plan);
            handles.push(s.spawn(move || {
                let mut first = Some(gate);
                loop {
                    if let Err(e) = run_workload(&w, plan, Some(active), first.take(), topo) {
                        warn!("co-runner {i}: {e}");
                        break;
                    }
                    if !relaunch || done.load(Ordering::Acquire) {
                        break;
                    }
                }
            }));
        }
        let subject = run_workload(&spec.workload, &plan, Some(&actives[0]), Some(gate), topo);
        done.store(true, Ordering::Release);
        for h in handles {
            let _ = h.join();
        }
        subject.map_err(ExperimentError::from)
    })
}

/// Runs the subject privately and then sharing one pool with 1..hosts-1
/// co-runners started together with it.
pub fn cmd_sharing(spec: &ExperimentSpec, force: bool) -> Result<SharingReport, ExperimentError> {
    spec.validate()?;
    let Sweep::Sharing {
        hosts,
        co_runners,
        label,
        relaunch_co_runners,
    } = &spec.sweep
    else {
        return Err(ExperimentError::Spec("not a sharing experiment".into()));
    };
    let topo = Topology::discover();
    let local = pick_local(spec, &topo)?;
    let pool = spec.pool_node.unwrap_or_else(|| topo.memory_nodes().into_iter().max().unwrap_or(local));
    // Fail fast when even the largest configuration cannot be built.
    plan_sharing(&topo, *hosts, pool)?;
    let out = spec.out(force);
    let mut configurations = Vec::new();
    for h in 1..=*hosts {
        let comps = plan_sharing(&topo, h, pool)?;
        let mut runs = Vec::new();
        let mut failure = None;
        for rep in 1..=spec.repetitions {
            let p = sharing_run(spec, &comps, co_runners, *relaunch_co_runners, &topo)?;
            let file = save_profile(&out, &format!("sharing/h{h}/rep{rep}.jsonl"), &p)?;
            if p.crashed {
                failure = Some(format!("subject exited with status {}", p.exit_status));
            }
            runs.push(RunRecord {
                repetition: rep,
                seconds: p.wall_time_secs,
                exit_status: p.exit_status,
                crashed: p.crashed,
                profile_file: file,
            });
        }
        let (mean, min, max) = stats(&runs.iter().map(|r| r.seconds).collect::<Vec<_>>());
        configurations.push(SharingConfig {
            hosts: h,
            name: if h == 1 { "private".into() } else { "shared".into() },
            co_runners: (1..h).map(|i| co_runners[(i - 1) % co_runners.len()].clone()).collect(),
            status: if failure.is_some() { PointStatus::Failed } else { PointStatus::Ok },
            reason: failure,
            runs,
            mean_seconds: mean,
            min_seconds: min,
            max_seconds: max,
            slowdown: None,
        });
    }
    if let Some(private) = configurations.first().and_then(|c| c.mean_seconds) {
        for c in &mut configurations {
            c.slowdown = c.mean_seconds.map(|m| m / private - 1.0);
        }
    }
    let report = SharingReport {
        header: OutputHeader::new(topo),
        workload: spec.workload.clone(),
        label: label.clone(),
        pool_node: pool,
        configurations,
    };
    out.write_json("sharing_report.json", &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sweep: Sweep) -> ExperimentSpec {
        ExperimentSpec::new(WorkloadSpec::new(vec!["true".into()]), sweep)
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn spec_validation() {
        let ok = spec(Sweep::CapacityFractions { fractions: default_fractions() });
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.repetitions = 0;
        assert!(bad.validate().is_err());
        let bad = spec(Sweep::CapacityFractions { fractions: vec![0.5, 1.5] });
        assert!(bad.validate().is_err());
        let bad = spec(Sweep::Sharing {
            hosts: 2,
            co_runners: vec![],
            label: None,
            relaunch_co_runners: true,
        });
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.workload.argv.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_from_toml_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "[workload]\nargv = [\"./app\", \"-n\", \"4\"]\n[sweep]\nkind = \"capacity_fractions\"\n",
        )
        .unwrap();
        let s = ExperimentSpec::load(&path).unwrap();
        assert_eq!(s.repetitions, DEFAULT_REPETITIONS);
        assert_eq!(s.sweep, Sweep::CapacityFractions { fractions: default_fractions() });
        assert_eq!(s.thresholds, Thresholds::default());

        let json = dir.path().join("exp.json");
        std::fs::write(&json, serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(ExperimentSpec::load(&json).unwrap(), s);
    }

    #[test]
    fn single_node_link_scaling_is_unsatisfiable() {
        if Topology::discover().memory_nodes().len() > 1 {
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(Sweep::LinkScaling {
            max_links: None,
            include_local: true,
        });
        s.output_dir = dir.path().to_path_buf();
        assert!(matches!(
            cmd_scale_links(&s, false),
            Err(ExperimentError::Composition(EmulatorError::Unsatisfiable(_)))
        ));
    }

    #[test]
    fn sweep_runs_and_skips_unavailable_fractions() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(Sweep::CapacityFractions {
            fractions: vec![0.0, 0.75],
        });
        s.workload = WorkloadSpec::new(vec!["sh".into(), "-c".into(), "sleep 0.2".into()]);
        s.repetitions = 1;
        s.sample_period_secs = 0.1;
        s.output_dir = dir.path().to_path_buf();
        let r = cmd_sweep_capacity(&s, false).unwrap();
        assert_eq!(r.peak_source, "calibrated");
        assert_eq!(r.points[0].status, PointStatus::Ok);
        assert!(r.points[0].median_seconds.unwrap() >= 0.2);
        assert!(dir.path().join(SWEEP_REPORT_FILE).exists());
        if Topology::discover().memory_nodes().len() < 2 {
            assert_eq!(r.points[1].status, PointStatus::Skipped);
            assert!(r.class.is_none());
            assert!(r.class_note.as_deref().unwrap().contains("0.75"));
        }
        // A rerun without force refuses to overwrite.
        assert!(matches!(cmd_sweep_capacity(&s, false), Err(ExperimentError::Output(_))));
    }

    #[test]
    fn crashed_runs_mark_the_point_failed() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(Sweep::CapacityFractions { fractions: vec![0.0] });
        s.workload = WorkloadSpec::new(vec!["false".into()]);
        s.repetitions = 1;
        s.peak_usage_bytes = Some(1 << 20);
        s.output_dir = dir.path().to_path_buf();
        let r = cmd_sweep_capacity(&s, false).unwrap();
        assert_eq!(r.points[0].status, PointStatus::Failed);
        assert!(r.class.is_none());
    }
}
