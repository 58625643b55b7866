//! Sampling plans, recorded profiles, and the JSON-lines profile format.
//!
//! A profile file holds one header object on the first line followed by one
//! snapshot object per line:
//!
//! ```text
//! {"record":"header","format":"memcompose-profile/1","pids":[4242],...}
//! {"record":"snapshot","timestamp_ns":0,"rss_kib":1024,...}
//! ```

use std::io::{self, BufRead, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::emulator::Composition;
use crate::procfs::{MemSnapshot, Pid};
use crate::topology::Topology;

pub const PROFILE_FORMAT: &str = "memcompose-profile/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Sample and reset referenced bits every `period`.
    Timer,
    /// Sample when the workload stops itself with `SIGSTOP`.
    Interrupt,
    /// Stop and sample when a stdout line matches `pattern`.
    OutputInterrupt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternSyntax {
    #[default]
    Substring,
    Regex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub mode: SamplingMode,
    pub period_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default)]
    pub pattern_syntax: PatternSyntax,
    #[serde(default)]
    pub sample_all_processes: bool,
    #[serde(default)]
    pub rank0_only: bool,
    /// Interrupt mode: give up if the workload has not stopped this long
    /// after launch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_timeout_secs: Option<f64>,
    /// Read `numa_maps` with every snapshot.
    #[serde(default = "default_true")]
    pub node_pages: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self::timer(1.0)
    }
}

impl SamplingPlan {
    pub fn timer(period_secs: f64) -> Self {
        SamplingPlan {
            mode: SamplingMode::Timer,
            period_secs,
            pattern: None,
            pattern_syntax: PatternSyntax::Substring,
            sample_all_processes: false,
            rank0_only: false,
            stop_timeout_secs: None,
            node_pages: true,
        }
    }

    pub fn interrupt() -> Self {
        SamplingPlan {
            mode: SamplingMode::Interrupt,
            ..Self::timer(1.0)
        }
    }

    pub fn output(pattern: impl Into<String>, syntax: PatternSyntax) -> Self {
        SamplingPlan {
            mode: SamplingMode::OutputInterrupt,
            pattern: Some(pattern.into()),
            pattern_syntax: syntax,
            ..Self::timer(1.0)
        }
    }

    pub fn period(&self) -> Duration {
        Duration::from_secs_f64(self.period_secs)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.period_secs > 0.0 && self.period_secs.is_finite()) {
            return Err(format!("period must be > 0, got {}", self.period_secs));
        }
        match (self.mode, &self.pattern) {
            (SamplingMode::OutputInterrupt, None) => return Err("output-interrupt mode needs a pattern".into()),
            (SamplingMode::OutputInterrupt, Some(p)) if p.is_empty() => return Err("pattern is empty".into()),
            (SamplingMode::Timer | SamplingMode::Interrupt, Some(_)) => {
                return Err("a pattern is only valid in output-interrupt mode".into())
            }
            _ => {}
        }
        if self.rank0_only && self.sample_all_processes {
            return Err("rank0_only and sample_all_processes are mutually exclusive".into());
        }
        if let Some(t) = self.stop_timeout_secs {
            if !(t > 0.0) {
                return Err(format!("stop timeout must be > 0, got {t}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLabel {
    InitEnd,
    ComputeEnd,
    Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMark {
    pub timestamp_ns: u64,
    pub label: PhaseLabel,
    /// Index of the snapshot taken at this mark.
    pub snapshot: usize,
}

/// Which per-process quantity sums into a job's capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    #[default]
    Rss,
    Pss,
}

/// Memory profile of one supervised process (or, after aggregation, of a job).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub pids: Vec<Pid>,
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<u32>,
    pub plan: SamplingPlan,
    #[serde(skip)]
    pub snapshots: Vec<MemSnapshot>,
    pub phase_marks: Vec<PhaseMark>,
    pub wall_time_secs: f64,
    /// Exit code, or 128 + signal number when killed by a signal.
    pub exit_status: i32,
    pub crashed: bool,
    /// Set on aggregated profiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<Basis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composition: Option<Composition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<Topology>,
}

impl Profile {
    pub fn empty(pids: Vec<Pid>, command: Vec<String>, plan: SamplingPlan) -> Self {
        Profile {
            pids,
            command,
            rank: None,
            plan,
            snapshots: Vec::new(),
            phase_marks: Vec::new(),
            wall_time_secs: 0.0,
            exit_status: 0,
            crashed: false,
            basis: None,
            composition: None,
            topology: None,
        }
    }

    pub fn pid(&self) -> Pid {
        self.pids.first().copied().unwrap_or(0)
    }

    pub fn mark(&self, label: PhaseLabel) -> Option<&PhaseMark> {
        self.phase_marks.iter().find(|m| m.label == label)
    }

    pub fn labels(&self) -> Vec<PhaseLabel> {
        self.phase_marks.iter().map(|m| m.label).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = serde_json::to_value(self)?;
        let obj = header.as_object_mut().expect("profile serializes to an object");
        obj.insert("record".into(), "header".into());
        obj.insert("format".into(), PROFILE_FORMAT.into());
        obj.insert("snapshot_count".into(), self.snapshots.len().into());
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in &self.snapshots {
            let mut v = serde_json::to_value(s)?;
            v.as_object_mut()
                .expect("snapshot serializes to an object")
                .insert("record".into(), "snapshot".into());
            serde_json::to_writer(&mut w, &v)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Profile> {
        let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
        let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let (_, first) = lines.next().ok_or_else(|| bad("empty profile file".into()))?;
        let header: serde_json::Value = serde_json::from_str(&first?)?;
        if header.get("record").and_then(|v| v.as_str()) != Some("header") {
            return Err(bad("first line is not a header record".into()));
        }
        match header.get("format").and_then(|v| v.as_str()) {
            Some(PROFILE_FORMAT) => {}
            other => return Err(bad(format!("unsupported profile format {other:?}"))),
        }
        let mut profile: Profile = serde_json::from_value(header)?;
        for (i, line) in lines {
            let v: serde_json::Value = serde_json::from_str(&line?)?;
            if v.get("record").and_then(|r| r.as_str()) != Some("snapshot") {
                return Err(bad(format!("line {}: expected a snapshot record", i + 1)));
            }
            profile.snapshots.push(serde_json::from_value(v)?);
        }
        Ok(profile)
    }
}
