//! Launch a workload, sample its memory accounting, and record a [`Profile`].
//!
//! Supervision is a single `epoll_wait` loop per job reacting to three
//! sources: timer expiry (timer mode), `SIGCHLD` (delivered through a wake
//! pipe, see [`sigchld`]) and readability of the children's captured stdout
//! (output-interrupt mode). Every stop the loop observes is answered by
//! exactly one `SIGCONT`.
//!
//! Multi-process jobs come in two shapes. With several commands, command `i`
//! is rank `i`. With a single launcher command (e.g. `mpirun`) and
//! `rank0_only` or `sample_all_processes`, ranks are discovered among the
//! launcher's descendants through the rank variables in their environment
//! ([`procfs::RANK_ENV_VARS`]); this requires timer or output-interrupt
//! mode since stops of grandchildren are invisible to `waitpid`.

pub mod profile;
pub mod sigchld;
pub mod spawn;

use std::collections::BTreeMap;
use std::ffi::{OsStr, OsString};
use std::io::{self, Write};
use std::os::fd::{AsRawFd, OwnedFd};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use log::{debug, warn};
use regex::Regex;
use thiserror::Error;

pub use profile::{Basis, PatternSyntax, PhaseLabel, PhaseMark, Profile, SamplingMode, SamplingPlan};
pub use spawn::{LaunchSpec, SpawnError};

use crate::emulator::{apply_composition, Composition, EmulatorError, LaunchPolicy};
use crate::procfs::{self, Pid, ProcfsError};
use crate::topology::Topology;
use sigchld::ChildWake;

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("spawn failed: {0}")]
    SpawnFailure(#[from] SpawnError),
    #[error(transparent)]
    Composition(#[from] EmulatorError),
    #[error("bad pattern: {0}")]
    BadPattern(String),
    #[error("bad sampling plan: {0}")]
    BadPlan(String),
    #[error("child {pid} never stopped within {timeout_secs} s")]
    ChildNeverStopped {
        pid: Pid,
        timeout_secs: f64,
        profile: Box<Profile>,
    },
    #[error(transparent)]
    Procfs(#[from] ProcfsError),
    #[error("supervision loop: {0}")]
    Os(#[from] io::Error),
}

/// Where child stdout goes. Anything but `Inherit` routes it through the
/// supervisor in every sampling mode.
#[derive(Debug, Clone, Default)]
pub enum OutputSink {
    /// Forward unmodified to the supervisor's stdout.
    #[default]
    Inherit,
    Discard,
    Capture(Arc<Mutex<Vec<u8>>>),
}

impl OutputSink {
    fn write_line(&self, line: &[u8]) {
        match self {
            OutputSink::Inherit => {
                let mut out = io::stdout().lock();
                let _ = out.write_all(line);
                let _ = out.flush();
            }
            OutputSink::Discard => {}
            OutputSink::Capture(buf) => buf.lock().unwrap_or_else(|e| e.into_inner()).extend_from_slice(line),
        }
    }
}

/// A supervised job: one or more commands sharing a sampling plan and a
/// launch policy.
#[derive(Debug, Clone)]
pub struct Job {
    commands: Vec<Vec<OsString>>,
    plan: SamplingPlan,
    policy: LaunchPolicy,
    composition: Option<Composition>,
    gate: Option<Arc<Barrier>>,
    sink: OutputSink,
    env: Vec<(OsString, OsString)>,
}

impl Job {
    pub fn new<C, S>(commands: C, plan: SamplingPlan) -> Self
    where
        C: IntoIterator,
        C::Item: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        Job {
            commands: commands
                .into_iter()
                .map(|c| c.into_iter().map(|a| a.as_ref().to_os_string()).collect())
                .collect(),
            plan,
            policy: LaunchPolicy::unrestricted(),
            composition: None,
            gate: None,
            sink: OutputSink::Inherit,
            env: vec![(crate::selfstop::SUPERVISED_ENV.into(), "1".into())],
        }
    }

    pub fn policy(mut self, policy: LaunchPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Recorded in the profile header.
    pub fn composition(mut self, c: Composition) -> Self {
        self.composition = Some(c);
        self
    }

    /// Children are launched stopped and released only after every party of
    /// `barrier` has launched.
    pub fn gate(mut self, barrier: Arc<Barrier>) -> Self {
        self.gate = Some(barrier);
        self
    }

    pub fn output(mut self, sink: OutputSink) -> Self {
        self.sink = sink;
        self
    }

    pub fn env(mut self, key: impl Into<OsString>, value: impl Into<OsString>) -> Self {
        self.env.push((key.into(), value.into()));
        self
    }

    fn launcher_mode(&self) -> bool {
        self.commands.len() == 1 && (self.plan.rank0_only || self.plan.sample_all_processes)
    }

    /// Runs the job to completion; one profile per sampled process.
    pub fn run(self) -> Result<Vec<Profile>, SupervisorError> {
        self.plan.validate().map_err(SupervisorError::BadPlan)?;
        if self.commands.is_empty() || self.commands.iter().any(|c| c.is_empty()) {
            return Err(SpawnError::EmptyCommand.into());
        }
        if self.launcher_mode() && self.plan.mode == SamplingMode::Interrupt {
            return Err(SupervisorError::BadPlan(
                "interrupt mode cannot observe stops of ranks started by a launcher; \
                 pass the ranks as separate commands or use timer/output mode"
                    .into(),
            ));
        }
        let pattern = match (&self.plan.mode, &self.plan.pattern) {
            (SamplingMode::OutputInterrupt, Some(p)) => Some(compile_pattern(p, self.plan.pattern_syntax)?),
            _ => None,
        };
        procfs::check_kernel()?;
        EventLoop::new(self, pattern)?.run()
    }
}

pub fn compile_pattern(pattern: &str, syntax: PatternSyntax) -> Result<Regex, SupervisorError> {
    if pattern.is_empty() {
        return Err(SupervisorError::BadPattern("empty pattern".into()));
    }
    let source = match syntax {
        PatternSyntax::Substring => regex::escape(pattern),
        PatternSyntax::Regex => pattern.to_string(),
    };
    Regex::new(&source).map_err(|e| SupervisorError::BadPattern(e.to_string()))
}

/// Runs `command` under `plan`, with `composition` armed for the child when
/// given. Returns the profile of the sampled process (rank 0 for launchers).
pub fn run_profiled<S: AsRef<OsStr>>(
    command: &[S],
    plan: &SamplingPlan,
    composition: Option<&Composition>,
) -> Result<Profile, SupervisorError> {
    let topo = Topology::discover();
    let active = composition.map(|c| apply_composition(c, &topo)).transpose()?;
    let mut job = Job::new([command.iter().map(|a| a.as_ref())], plan.clone());
    if let Some(a) = &active {
        job = job.policy(a.launch_policy()).composition(a.composition.clone());
    }
    let profiles = job.run()?;
    drop(active);
    let mut p = profiles
        .into_iter()
        .next()
        .ok_or_else(|| SupervisorError::BadPlan("no process was sampled".into()))?;
    p.topology = Some(topo);
    Ok(p)
}

/// [`run_profiled`] in interrupt mode: the workload marks region boundaries
/// by stopping itself (see [`crate::selfstop::region_boundary`]).
pub fn run_interrupt_mode<S: AsRef<OsStr>>(command: &[S], plan: &SamplingPlan) -> Result<Profile, SupervisorError> {
    if plan.mode != SamplingMode::Interrupt {
        return Err(SupervisorError::BadPlan("plan is not in interrupt mode".into()));
    }
    run_profiled(command, plan, None)
}

/// [`run_profiled`] in output-interrupt mode.
pub fn run_output_interrupt<S: AsRef<OsStr>>(command: &[S], plan: &SamplingPlan) -> Result<Profile, SupervisorError> {
    if plan.mode != SamplingMode::OutputInterrupt {
        return Err(SupervisorError::BadPlan("plan is not in output-interrupt mode".into()));
    }
    run_profiled(command, plan, None)
}

/// Supervises a multi-process job; aggregation is left to
/// [`crate::metrics::aggregate`].
pub fn supervise_job<C, S>(commands: C, plan: &SamplingPlan) -> Result<Vec<Profile>, SupervisorError>
where
    C: IntoIterator,
    C::Item: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Job::new(commands, plan.clone()).run()
}

const WAKE_TOKEN: u64 = u64::MAX;
const IDLE_POLL: Duration = Duration::from_millis(250);
const DISCOVERY_PERIOD: Duration = Duration::from_millis(250);
const STOP_POLL_LIMIT: Duration = Duration::from_secs(2);

struct Child {
    spec: LaunchSpec,
    pid: Pid,
    stdout: Option<OwnedFd>,
    line_buf: Vec<u8>,
    gate: Option<spawn::Spawned>,
    exit: Option<i32>,
    signaled: bool,
    ended_ns: u64,
}

struct Target {
    child: Option<usize>,
    sampled: bool,
    alive: bool,
    stops: usize,
    ended_ns: Option<u64>,
    profile: Profile,
}

struct EventLoop {
    job: Job,
    pattern: Option<Regex>,
    start: Instant,
    children: Vec<Child>,
    targets: BTreeMap<Pid, Target>,
    wake: ChildWake,
    epfd: OwnedFd,
    rank_found: bool,
}

fn wait_status_code(status: i32) -> (i32, bool) {
    if libc::WIFEXITED(status) {
        (libc::WEXITSTATUS(status), false)
    } else if libc::WIFSIGNALED(status) {
        (128 + libc::WTERMSIG(status), true)
    } else {
        (-1, true)
    }
}

enum ChildEvent {
    Stopped,
    Exited(i32),
}

fn waitpid(pid: Pid, flags: i32) -> io::Result<Option<ChildEvent>> {
    let mut status = 0;
    loop {
        // SAFETY: pid is a direct child of this process.
        let rc = unsafe { libc::waitpid(pid as libc::pid_t, &mut status, flags | libc::WUNTRACED) };
        if rc < 0 {
            let e = io::Error::last_os_error();
            if e.raw_os_error() == Some(libc::EINTR) {
                continue;
            }
            return Err(e);
        }
        if rc == 0 {
            return Ok(None);
        }
        return Ok(Some(if libc::WIFSTOPPED(status) {
            ChildEvent::Stopped
        } else {
            ChildEvent::Exited(status)
        }));
    }
}

fn signal(pid: Pid, sig: i32) {
    // SAFETY: plain kill(2).
    unsafe { libc::kill(pid as libc::pid_t, sig) };
}

fn proc_state(pid: Pid) -> Option<char> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    stat.rsplit_once(')')?.1.split_whitespace().next()?.chars().next()
}

fn cmdline(pid: Pid) -> Vec<String> {
    std::fs::read(format!("/proc/{pid}/cmdline"))
        .map(|raw| {
            raw.split(|&b| b == 0)
                .filter(|s| !s.is_empty())
                .map(|s| String::from_utf8_lossy(s).into_owned())
                .collect()
        })
        .unwrap_or_default()
}

impl EventLoop {
    fn new(job: Job, pattern: Option<Regex>) -> Result<Self, SupervisorError> {
        let wake = ChildWake::acquire()?;
        // SAFETY: epoll_create1 returns a new descriptor or -1.
        let fd = unsafe { libc::epoll_create1(libc::EPOLL_CLOEXEC) };
        if fd < 0 {
            return Err(io::Error::last_os_error().into());
        }
        let epfd = unsafe { <OwnedFd as std::os::fd::FromRawFd>::from_raw_fd(fd) };
        let lp = EventLoop {
            job,
            pattern,
            start: Instant::now(),
            children: Vec::new(),
            targets: BTreeMap::new(),
            wake,
            epfd,
            rank_found: false,
        };
        lp.watch(lp.wake.fd(), WAKE_TOKEN)?;
        Ok(lp)
    }

    fn watch(&self, fd: i32, token: u64) -> io::Result<()> {
        let mut ev = libc::epoll_event {
            events: (libc::EPOLLIN | libc::EPOLLHUP) as u32,
            u64: token,
        };
        // SAFETY: registering a valid descriptor on our epoll instance.
        if unsafe { libc::epoll_ctl(self.epfd.as_raw_fd(), libc::EPOLL_CTL_ADD, fd, &mut ev) } != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    fn unwatch(&self, fd: i32) {
        // SAFETY: removing a descriptor; errors are irrelevant.
        unsafe { libc::epoll_ctl(self.epfd.as_raw_fd(), libc::EPOLL_CTL_DEL, fd, std::ptr::null_mut()) };
    }

    fn now_ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    fn new_target(&self, pid: Pid, child: Option<usize>, command: Vec<String>, rank: Option<u32>) -> Target {
        let mut profile = Profile::empty(vec![pid], command, self.job.plan.clone());
        profile.rank = rank;
        profile.composition = self.job.composition.clone();
        Target {
            child,
            sampled: true,
            alive: true,
            stops: 0,
            ended_ns: None,
            profile,
        }
    }

    /// Appends a snapshot for `pid`; returns its index. A vanished process
    /// is marked dead rather than treated as an error.
    fn sample(&mut self, pid: Pid, clear: bool) -> Result<Option<usize>, SupervisorError> {
        let mut ts = self.now_ns();
        let with_nodes = self.job.plan.node_pages;
        let Some(target) = self.targets.get_mut(&pid) else {
            return Ok(None);
        };
        if !target.alive || !target.sampled {
            return Ok(None);
        }
        if let Some(last) = target.profile.snapshots.last() {
            ts = ts.max(last.timestamp_ns + 1);
        }
        let snap = if with_nodes {
            procfs::snapshot(pid, ts)
        } else {
            procfs::read_mem_stats(pid).map(|mut s| {
                s.timestamp_ns = ts;
                s
            })
        };
        let snap = match snap {
            Ok(s) => s,
            Err(ProcfsError::ProcessGone(_)) => {
                target.alive = false;
                target.ended_ns.get_or_insert(ts);
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        target.profile.snapshots.push(snap);
        let idx = target.profile.snapshots.len() - 1;
        if clear {
            match procfs::clear_referenced(pid) {
                Ok(()) | Err(ProcfsError::ProcessGone(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Some(idx))
    }

    fn mark(&mut self, pid: Pid, idx: usize, label: PhaseLabel) {
        if let Some(t) = self.targets.get_mut(&pid) {
            let ts = t.profile.snapshots[idx].timestamp_ns;
            t.profile.phase_marks.push(PhaseMark {
                timestamp_ns: ts,
                label,
                snapshot: idx,
            });
        }
    }

    fn launch(&mut self) -> Result<(), SupervisorError> {
        let capture =
            self.job.plan.mode == SamplingMode::OutputInterrupt || !matches!(self.job.sink, OutputSink::Inherit);
        let gated = self.job.gate.is_some();
        for argv in self.job.commands.clone() {
            let spec = LaunchSpec {
                argv,
                env: self.job.env.clone(),
                capture_stdout: capture,
                gated,
                policy: self.job.policy,
            };
            let mut spawned = match spawn::spawn(&spec) {
                Ok(s) => s,
                Err(e) => {
                    self.kill_all();
                    return Err(e.into());
                }
            };
            let idx = self.children.len();
            let stdout = spawned.stdout.take();
            if let Some(fd) = &stdout {
                self.watch(fd.as_raw_fd(), idx as u64)?;
            }
            self.children.push(Child {
                spec,
                pid: spawned.pid,
                stdout,
                line_buf: Vec::new(),
                gate: gated.then_some(spawned),
                exit: None,
                signaled: false,
                ended_ns: 0,
            });
        }
        if let Some(barrier) = self.job.gate.clone() {
            barrier.wait();
            for idx in 0..self.children.len() {
                let Some(mut g) = self.children[idx].gate.take() else {
                    continue;
                };
                if let Err(e) = g.release_gate(&self.children[idx].spec) {
                    self.children[idx].exit = Some(127);
                    self.kill_all();
                    return Err(e.into());
                }
            }
        }
        // The clock starts when the workload is released.
        self.start = Instant::now();

        let launcher = self.job.launcher_mode();
        let multi = self.job.commands.len() > 1;
        for (idx, c) in self.children.iter().enumerate() {
            let command = c.spec.argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
            let rank = (multi && !launcher).then_some(idx as u32);
            let mut t = self.new_target(c.pid, Some(idx), command, rank);
            t.sampled = launcher || !self.job.plan.rank0_only || idx == 0;
            self.targets.insert(c.pid, t);
        }
        let pids: Vec<Pid> = self.targets.keys().copied().collect();
        for pid in pids {
            self.sample(pid, false)?;
        }
        Ok(())
    }

    fn kill_all(&mut self) {
        for c in &mut self.children {
            if c.exit.is_none() {
                signal(c.pid, libc::SIGKILL);
                signal(c.pid, libc::SIGCONT);
                if let Ok(Some(ChildEvent::Exited(st))) = waitpid(c.pid, 0) {
                    c.exit = Some(wait_status_code(st).0);
                }
            }
        }
    }

    fn discover_ranks(&mut self) -> Result<(), SupervisorError> {
        let Some(root) = self.children.first().map(|c| c.pid) else {
            return Ok(());
        };
        for pid in procfs::descendants(root) {
            if self.targets.contains_key(&pid) {
                continue;
            }
            let Some(rank) = procfs::mpi_rank(pid) else {
                continue;
            };
            if self.job.plan.rank0_only && rank != 0 {
                continue;
            }
            // A rank may fork helpers that inherit its environment; keep the
            // topmost process per rank.
            if self.targets.values().any(|t| t.profile.rank == Some(rank) && t.child.is_none()) {
                continue;
            }
            debug!("discovered rank {rank} as pid {pid}");
            let t = self.new_target(pid, None, cmdline(pid), Some(rank));
            self.targets.insert(pid, t);
            self.rank_found = true;
            self.sample(pid, false)?;
        }
        if self.rank_found {
            for t in self.targets.values_mut() {
                if t.child.is_some() {
                    t.sampled = false;
                }
            }
        }
        Ok(())
    }

    fn handle_stop(&mut self, child_idx: usize, label: Option<PhaseLabel>) -> Result<(), SupervisorError> {
        let pid = self.children[child_idx].pid;
        if let Some(label) = label {
            if let Some(idx) = self.sample(pid, true)? {
                self.mark(pid, idx, label);
            }
        }
        signal(pid, libc::SIGCONT);
        Ok(())
    }

    fn record_exit(&mut self, child_idx: usize, status: i32) {
        let now = self.now_ns();
        let c = &mut self.children[child_idx];
        let (code, signaled) = wait_status_code(status);
        c.exit = Some(code);
        c.signaled = signaled;
        c.ended_ns = now;
        if let Some(t) = self.targets.get_mut(&c.pid) {
            t.alive = false;
            t.ended_ns.get_or_insert(now);
        }
    }

    fn interrupt_label(&mut self, pid: Pid) -> PhaseLabel {
        let t = self.targets.get_mut(&pid).expect("direct child has a target");
        let label = match t.stops {
            0 => PhaseLabel::InitEnd,
            1 => PhaseLabel::ComputeEnd,
            _ => PhaseLabel::Interval,
        };
        t.stops += 1;
        label
    }

    fn reap(&mut self) -> Result<(), SupervisorError> {
        for idx in 0..self.children.len() {
            while self.children[idx].exit.is_none() {
                let pid = self.children[idx].pid;
                match waitpid(pid, libc::WNOHANG)? {
                    None => break,
                    Some(ChildEvent::Exited(st)) => self.record_exit(idx, st),
                    Some(ChildEvent::Stopped) => {
                        let sampled = self.targets.get(&pid).is_some_and(|t| t.sampled);
                        let label = (self.job.plan.mode == SamplingMode::Interrupt && sampled)
                            .then(|| self.interrupt_label(pid));
                        self.handle_stop(idx, label)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Stop, sample, clear, resume, for an output match on child `idx`.
    fn output_interrupt(&mut self, child_idx: usize) -> Result<(), SupervisorError> {
        if self.job.launcher_mode() {
            if !self.rank_found {
                self.discover_ranks()?;
            }
            let ranks: Vec<Pid> = self
                .targets
                .iter()
                .filter(|(_, t)| t.child.is_none() && t.sampled && t.alive)
                .map(|(&p, _)| p)
                .collect();
            if !ranks.is_empty() {
                for &p in &ranks {
                    signal(p, libc::SIGSTOP);
                }
                for &p in &ranks {
                    let deadline = Instant::now() + STOP_POLL_LIMIT;
                    while !matches!(proc_state(p), Some('T') | None) && Instant::now() < deadline {
                        std::thread::sleep(Duration::from_micros(200));
                    }
                    if let Some(idx) = self.sample(p, true)? {
                        self.mark(p, idx, PhaseLabel::Interval);
                    }
                    signal(p, libc::SIGCONT);
                }
                return Ok(());
            }
        }
        let pid = self.children[child_idx].pid;
        if self.children[child_idx].exit.is_some() || !self.targets.get(&pid).is_some_and(|t| t.sampled) {
            return Ok(());
        }
        signal(pid, libc::SIGSTOP);
        match waitpid(pid, 0)? {
            Some(ChildEvent::Stopped) => self.handle_stop(child_idx, Some(PhaseLabel::Interval)),
            Some(ChildEvent::Exited(st)) => {
                self.record_exit(child_idx, st);
                Ok(())
            }
            None => Ok(()),
        }
    }

    fn read_output(&mut self, idx: usize, at_exit: bool) -> Result<(), SupervisorError> {
        let Some(fd) = self.children[idx].stdout.as_ref().map(|f| f.as_raw_fd()) else {
            return Ok(());
        };
        let mut buf = [0u8; 8192];
        let mut eof = false;
        loop {
            // SAFETY: non-blocking read into a local buffer.
            let n = unsafe { libc::read(fd, buf.as_mut_ptr().cast(), buf.len()) };
            if n > 0 {
                self.children[idx].line_buf.extend_from_slice(&buf[..n as usize]);
                continue;
            }
            if n == 0 {
                eof = true;
            } else {
                let e = io::Error::last_os_error();
                match e.raw_os_error() {
                    Some(libc::EINTR) => continue,
                    Some(libc::EAGAIN) => {}
                    _ => return Err(e.into()),
                }
            }
            break;
        }

        let mut matches = 0;
        while let Some(pos) = self.children[idx].line_buf.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.children[idx].line_buf.drain(..=pos).collect();
            self.job.sink.write_line(&line);
            if let Some(re) = &self.pattern {
                if re.is_match(&String::from_utf8_lossy(&line[..line.len() - 1])) {
                    matches += 1;
                }
            }
        }
        if eof || at_exit {
            let rest = std::mem::take(&mut self.children[idx].line_buf);
            if !rest.is_empty() {
                self.job.sink.write_line(&rest);
            }
        }
        if eof {
            self.unwatch(fd);
            self.children[idx].stdout = None;
        }
        for _ in 0..matches {
            self.output_interrupt(idx)?;
        }
        Ok(())
    }

    fn tick(&mut self) -> Result<(), SupervisorError> {
        if self.job.launcher_mode() {
            self.discover_ranks()?;
        }
        if self.job.plan.mode != SamplingMode::Timer {
            return Ok(());
        }
        let pids: Vec<Pid> = self.targets.iter().filter(|(_, t)| t.sampled && t.alive).map(|(&p, _)| p).collect();
        for pid in pids {
            self.sample(pid, true)?;
        }
        Ok(())
    }

    fn run(mut self) -> Result<Vec<Profile>, SupervisorError> {
        self.launch()?;
        let period = if self.job.plan.mode == SamplingMode::Timer {
            self.job.plan.period()
        } else {
            DISCOVERY_PERIOD
        };
        let periodic = self.job.plan.mode == SamplingMode::Timer || self.job.launcher_mode();
        let mut next_tick = self.start + period;
        let stop_deadline = self
            .job
            .plan
            .stop_timeout_secs
            .filter(|_| self.job.plan.mode == SamplingMode::Interrupt)
            .map(|s| self.start + Duration::from_secs_f64(s));
        let mut events = [libc::epoll_event { events: 0, u64: 0 }; 16];

        loop {
            self.reap()?;
            if self.children.iter().all(|c| c.exit.is_some()) {
                break;
            }
            let now = Instant::now();
            if periodic && now >= next_tick {
                self.tick()?;
                while next_tick <= Instant::now() {
                    next_tick += period;
                }
                continue;
            }
            if let Some(deadline) = stop_deadline {
                let stopped_once = self.targets.values().any(|t| t.stops > 0);
                if !stopped_once && now >= deadline {
                    let pid = self.children[0].pid;
                    self.kill_all();
                    let timeout_secs = self.job.plan.stop_timeout_secs.unwrap_or_default();
                    let mut profiles = self.finish();
                    return Err(SupervisorError::ChildNeverStopped {
                        pid,
                        timeout_secs,
                        profile: Box::new(profiles.remove(0)),
                    });
                }
            }
            let mut wait_for = IDLE_POLL;
            if periodic {
                wait_for = wait_for.min(next_tick.saturating_duration_since(now));
            }
            if let Some(d) = stop_deadline {
                wait_for = wait_for.min(d.saturating_duration_since(now));
            }
            let timeout_ms = wait_for.as_micros().div_ceil(1000) as i32;
            // SAFETY: events is a valid buffer of the given length.
            let n = unsafe {
                libc::epoll_wait(self.epfd.as_raw_fd(), events.as_mut_ptr(), events.len() as i32, timeout_ms)
            };
            if n < 0 {
                let e = io::Error::last_os_error();
                if e.raw_os_error() == Some(libc::EINTR) {
                    continue;
                }
                return Err(e.into());
            }
            for ev in &events[..n as usize] {
                let token = ev.u64;
                if token == WAKE_TOKEN {
                    self.wake.drain();
                } else {
                    self.read_output(token as usize, false)?;
                }
            }
        }

        for idx in 0..self.children.len() {
            self.read_output(idx, true)?;
        }
        Ok(self.finish())
    }

    fn finish(mut self) -> Vec<Profile> {
        let end_ns = self.now_ns();
        let launcher_status = self.children.first().and_then(|c| c.exit).unwrap_or(-1);
        let launcher_failed = self.children.first().is_some_and(|c| c.signaled || c.exit != Some(0));
        let mut out: Vec<(u32, usize, Profile)> = Vec::new();
        let targets = std::mem::take(&mut self.targets);
        for (_, t) in targets {
            if !t.sampled {
                continue;
            }
            let mut p = t.profile;
            let ended = t.ended_ns.unwrap_or(end_ns);
            p.wall_time_secs = ended as f64 / 1e9;
            match t.child {
                Some(idx) => {
                    let c = &self.children[idx];
                    p.exit_status = c.exit.unwrap_or(-1);
                    p.crashed = c.signaled || c.exit != Some(0);
                }
                None => {
                    p.exit_status = launcher_status;
                    p.crashed = launcher_failed;
                }
            }
            if p.snapshots.is_empty() {
                warn!("pid {} produced no readable snapshots", p.pid());
            }
            let order = t.child.unwrap_or(usize::MAX);
            out.push((p.rank.unwrap_or(0), order, p));
        }
        out.sort_by_key(|(rank, order, _)| (*order, *rank));
        out.into_iter().map(|(_, _, p)| p).collect()
    }
}
