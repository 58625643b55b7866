//! Derived memory-usage metrics and sensitivity classification.
//!
//! All functions here are pure over recorded [`Profile`]s.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::procfs::MemSnapshot;
use crate::supervisor::{Basis, PhaseLabel, Profile};

/// The bandwidth estimate counts each referenced page once per interval at
/// full page size; sparse or repeated accesses make the true traffic higher.
pub const BANDWIDTH_CAVEAT: &str =
    "lower bound: unique referenced pages per interval x page size; re-accesses and sub-page traffic are not counted";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("profile has {0} snapshots; at least 2 are required")]
    TooFewSnapshots(usize),
    #[error("no profiles to aggregate")]
    EmptyInput,
    #[error("baseline time must be a positive number, got {0}")]
    MissingBaseline(f64),
    #[error("no timed run at pooled fraction 0.75")]
    Missing75,
    #[error("thresholds must satisfy 0 <= t1 <= t2, got ({0}, {1})")]
    BadThresholds(f64, f64),
}

/// Denominator of the cold-page fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdNormalization {
    /// RSS at the end of the compute phase.
    #[default]
    FinalRss,
    PeakRss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t_secs: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TouchPoint {
    /// End of the interval.
    pub t_secs: f64,
    pub interval_secs: f64,
    pub referenced_kib: u64,
    /// Referenced share of the footprint at the end of the interval.
    pub touched_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub aggregate_basis: Basis,
    /// Peak footprint on the chosen basis.
    pub peak_rss_kib: u64,
    pub capacity_curve: Vec<SeriesPoint>,
    /// Share of the footprint never referenced during the compute phase.
    pub cold_fraction: Option<f64>,
    pub cold_normalization: ColdNormalization,
    /// Referenced share over the compute phase; `1 - cold_fraction`.
    pub compute_touched_fraction: Option<f64>,
    pub touch_series: Vec<TouchPoint>,
    pub mean_touched_fraction: f64,
    pub touched_fraction_quartiles: Option<Quartiles>,
    /// Bytes per second.
    pub est_bandwidth_series: Vec<SeriesPoint>,
    pub mean_est_bandwidth: f64,
    pub bandwidth_caveat: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn footprint(s: &MemSnapshot, basis: Basis) -> u64 {
    match basis {
        Basis::Rss => s.rss_kib,
        Basis::Pss => s.pss_kib,
    }
}

fn secs(ns: u64) -> f64 {
    ns as f64 / 1e9
}

fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(Quartiles {
        q1: at(0.25),
        median: at(0.5),
        q3: at(0.75),
    })
}

/// [`derive_with`] using final-RSS normalization.
pub fn derive(profile: &Profile) -> Result<DerivedMetrics, MetricsError> {
    derive_with(profile, ColdNormalization::FinalRss)
}

pub fn derive_with(profile: &Profile, cold_norm: ColdNormalization) -> Result<DerivedMetrics, MetricsError> {
    let snaps = &profile.snapshots;
    if snaps.len() < 2 {
        return Err(MetricsError::TooFewSnapshots(snaps.len()));
    }
    let basis = profile.basis.unwrap_or_default();
    let mut notes = Vec::new();

    let peak = snaps.iter().map(|s| footprint(s, basis)).max().unwrap_or(0);
    let capacity_curve = snaps
        .iter()
        .map(|s| SeriesPoint {
            t_secs: secs(s.timestamp_ns),
            value: if peak == 0 {
                0.0
            } else {
                footprint(s, basis) as f64 / peak as f64
            },
        })
        .collect();

    let touch_series: Vec<TouchPoint> = snaps
        .windows(2)
        .filter_map(|w| {
            let dt = secs(w[1].timestamp_ns.saturating_sub(w[0].timestamp_ns));
            (dt > 0.0).then(|| TouchPoint {
                t_secs: secs(w[1].timestamp_ns),
                interval_secs: dt,
                referenced_kib: w[1].referenced_kib,
                touched_fraction: if w[1].rss_kib == 0 {
                    0.0
                } else {
                    (w[1].referenced_kib as f64 / w[1].rss_kib as f64).min(1.0)
                },
            })
        })
        .collect();
    let fractions: Vec<f64> = touch_series.iter().map(|p| p.touched_fraction).collect();
    let mean_touched_fraction = if fractions.is_empty() {
        0.0
    } else {
        fractions.iter().sum::<f64>() / fractions.len() as f64
    };
    let est_bandwidth_series: Vec<SeriesPoint> = touch_series
        .iter()
        .map(|p| SeriesPoint {
            t_secs: p.t_secs,
            value: p.referenced_kib as f64 * 1024.0 / p.interval_secs,
        })
        .collect();
    let mean_est_bandwidth = if est_bandwidth_series.is_empty() {
        0.0
    } else {
        est_bandwidth_series.iter().map(|p| p.value).sum::<f64>() / est_bandwidth_series.len() as f64
    };

    let (cold_fraction, compute_touched_fraction) =
        match (profile.mark(PhaseLabel::InitEnd), profile.mark(PhaseLabel::ComputeEnd)) {
            (Some(init), Some(end)) if end.snapshot < snaps.len() && init.timestamp_ns <= end.timestamp_ns => {
                let s = &snaps[end.snapshot];
                let denom = match cold_norm {
                    ColdNormalization::FinalRss => s.rss_kib,
                    ColdNormalization::PeakRss => snaps.iter().map(|s| s.rss_kib).max().unwrap_or(0),
                };
                if denom == 0 {
                    notes.push("footprint is zero at compute end; cold fraction undefined".to_string());
                    (None, None)
                } else {
                    let touched = (s.referenced_kib as f64 / denom as f64).clamp(0.0, 1.0);
                    let cold = (s.rss_kib.saturating_sub(s.referenced_kib) as f64 / denom as f64).clamp(0.0, 1.0);
                    (Some(cold), Some(touched))
                }
            }
            _ => {
                notes.push("missing init_end/compute_end phase marks; cold fraction omitted".to_string());
                (None, None)
            }
        };

    Ok(DerivedMetrics {
        aggregate_basis: basis,
        peak_rss_kib: peak,
        capacity_curve,
        cold_fraction,
        cold_normalization: cold_norm,
        compute_touched_fraction,
        touched_fraction_quartiles: quartiles(&fractions),
        touch_series,
        mean_touched_fraction,
        est_bandwidth_series,
        mean_est_bandwidth,
        bandwidth_caveat: BANDWIDTH_CAVEAT.to_string(),
        notes,
    })
}

/// One CSV row per snapshot: time, capacity ratio, and (from the second row
/// on) the interval's referenced KiB and bandwidth estimate.
pub fn write_series_csv<W: Write>(m: &DerivedMetrics, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t_secs", "capacity_ratio", "referenced_kib", "touched_fraction", "est_bandwidth_bytes_per_sec"])?;
    for (i, c) in m.capacity_curve.iter().enumerate() {
        let touch = i.checked_sub(1).and_then(|j| m.touch_series.get(j));
        let bw = i.checked_sub(1).and_then(|j| m.est_bandwidth_series.get(j));
        out.write_record([
            format!("{:.6}", c.t_secs),
            format!("{:.6}", c.value),
            touch.map(|t| t.referenced_kib.to_string()).unwrap_or_default(),
            touch.map(|t| format!("{:.6}", t.touched_fraction)).unwrap_or_default(),
            bw.map(|b| format!("{:.1}", b.value)).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn nearest(snaps: &[MemSnapshot], t: u64, tolerance_ns: u64) -> Option<&MemSnapshot> {
    let idx = snaps.partition_point(|s| s.timestamp_ns < t);
    let cands = [idx.checked_sub(1), Some(idx)];
    cands
        .into_iter()
        .flatten()
        .filter_map(|i| snaps.get(i))
        .map(|s| (s.timestamp_ns.abs_diff(t), s))
        .filter(|(d, _)| *d <= tolerance_ns)
        .min_by_key(|(d, _)| *d)
        .map(|(_, s)| s)
}

/// Sums time-aligned profiles into one job profile on `basis`.
///
/// The timeline is that of the profile with the most snapshots; every other
/// profile contributes its nearest snapshot within `tolerance_secs`
/// (typically one sampling period), or nothing when it has none that close.
pub fn aggregate(profiles: &[Profile], basis: Basis, tolerance_secs: f64) -> Result<Profile, MetricsError> {
    let reference = profiles
        .iter()
        .max_by_key(|p| p.snapshots.len())
        .ok_or(MetricsError::EmptyInput)?;
    let tol = (tolerance_secs.max(0.0) * 1e9) as u64;

    let mut out = reference.clone();
    out.pids = profiles.iter().flat_map(|p| p.pids.iter().copied()).collect();
    out.rank = None;
    out.basis = Some(basis);
    out.wall_time_secs = profiles.iter().map(|p| p.wall_time_secs).fold(0.0, f64::max);
    out.crashed = profiles.iter().any(|p| p.crashed);
    out.exit_status = profiles.iter().map(|p| p.exit_status).find(|&s| s != 0).unwrap_or(0);
    if profiles.len() == 1 {
        return Ok(out);
    }
    out.snapshots = reference
        .snapshots
        .iter()
        .map(|r| {
            let mut sum = MemSnapshot {
                timestamp_ns: r.timestamp_ns,
                ..Default::default()
            };
            for p in profiles {
                if let Some(s) = nearest(&p.snapshots, r.timestamp_ns, tol) {
                    sum.rss_kib += s.rss_kib;
                    sum.pss_kib += s.pss_kib;
                    sum.referenced_kib += s.referenced_kib;
                    sum.swap_kib += s.swap_kib;
                    for (n, c) in &s.node_pages {
                        *sum.node_pages.entry(*n).or_default() += c;
                    }
                }
            }
            sum
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SensitivityClass {
    /// Insensitive to pooled memory.
    I,
    /// Moderately sensitive.
    II,
    /// Bandwidth sensitive.
    III,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t1: f64,
    pub t2: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { t1: 0.05, t2: 0.20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionTiming {
    pub fraction: f64,
    pub seconds: f64,
    /// `seconds / baseline - 1`, floored at zero.
    pub slowdown: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub baseline_seconds: f64,
    pub slowdown_by_fraction: Vec<FractionTiming>,
    pub class: SensitivityClass,
    pub thresholds: Thresholds,
}

/// Pooled fraction the class is decided at.
pub const CLASSIFY_FRACTION: f64 = 0.75;

pub fn class_for(slowdown: f64, th: Thresholds) -> SensitivityClass {
    if slowdown < th.t1 {
        SensitivityClass::I
    } else if slowdown <= th.t2 {
        SensitivityClass::II
    } else {
        SensitivityClass::III
    }
}

/// Classifies a workload from its baseline and per-fraction run times.
pub fn classify(baseline: f64, timed_runs: &[(f64, f64)], thresholds: Thresholds) -> Result<SensitivityReport, MetricsError> {
    if !(baseline > 0.0 && baseline.is_finite()) {
        return Err(MetricsError::MissingBaseline(baseline));
    }
    if !(0.0 <= thresholds.t1 && thresholds.t1 <= thresholds.t2) {
        return Err(MetricsError::BadThresholds(thresholds.t1, thresholds.t2));
    }
    let mut slowdown_by_fraction: Vec<FractionTiming> = timed_runs
        .iter()
        .map(|&(fraction, seconds)| FractionTiming {
            fraction,
            seconds,
            slowdown: (seconds / baseline - 1.0).max(0.0),
        })
        .collect();
    slowdown_by_fraction.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
    let at75 = slowdown_by_fraction
        .iter()
        .find(|t| (t.fraction - CLASSIFY_FRACTION).abs() < 1e-9)
        .ok_or(MetricsError::Missing75)?;
    Ok(SensitivityReport {
        baseline_seconds: baseline,
        class: class_for(at75.slowdown, thresholds),
        slowdown_by_fraction,
        thresholds,
    })
}
