//! Bandwidth (STREAM triad) and latency (pointer chase) probes.
//!
//! Both probes allocate their memory only after the composition has been
//! entered on the calling thread, so first touch follows the composition's
//! policy. Placement is read back from `numa_maps` before timing.

use std::collections::BTreeMap;
use std::sync::Barrier;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emulator::{ActiveComposition, Composition, EmulatorError, MemPolicy};
use crate::procfs::{self, NodeId, ProcfsError};

const TRIAD_SCALAR: f64 = 3.0;
const TRIAD_B: f64 = 1.0;
const TRIAD_C: f64 = 2.0;
/// Bytes moved per element per pass: two reads and one write of an `f64`.
pub const TRIAD_BYTES_PER_ELEMENT: u64 = 3 * 8;
pub const TRIAD_ACCOUNTING: &str =
    "3 x 8 bytes per element per pass (two reads, one write); write-allocate traffic excluded";

/// Size of one pointer-chase node: one cache line.
pub const CHASE_NODE_BYTES: usize = 64;
/// Chase working sets below this multiple of the last-level cache are flagged
/// invalid.
pub const CHASE_LLC_MULTIPLE: u64 = 8;
pub const DEFAULT_CHASE_WORKING_SET: u64 = 1 << 30;
pub const DEFAULT_TRIAD_REPETITIONS: usize = 10;
/// Pages found outside the composition's node set beyond this share make the
/// probe invalid.
const PLACEMENT_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Composition(#[from] EmulatorError),
    #[error("invalid probe parameters: {0}")]
    Invalid(String),
    #[error("triad validation failed at element {index}: got {got}, expected {expected}")]
    Validation { index: usize, got: f64, expected: f64 },
    #[error(transparent)]
    Procfs(#[from] ProcfsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Triad,
    Chase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    /// Short label of the composition, e.g. `RemoteOnly`.
    pub composition_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composition: Option<Composition>,
    /// GB/s (10^9 bytes) for triad, nanoseconds per dependent load for chase.
    pub value: f64,
    pub unit: String,
    pub working_set_bytes: u64,
    pub threads: usize,
    /// Every timed repetition, in the same unit as `value`.
    pub samples: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Pages of the probe buffer per node, measured before timing.
    pub placement_pages: BTreeMap<NodeId, u64>,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accounting: Option<String>,
}

impl ProbeResult {
    /// Coefficient of variation of the timed repetitions.
    pub fn coefficient_of_variation(&self) -> f64 {
        coefficient_of_variation(&self.samples)
    }
}

pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if mean == 0.0 {
        0.0
    } else {
        var.sqrt() / mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriadConfig {
    /// Total over the three arrays.
    pub working_set_bytes: u64,
    pub threads: usize,
    pub repetitions: usize,
}

impl TriadConfig {
    pub fn new(working_set_bytes: u64, threads: usize) -> Self {
        TriadConfig {
            working_set_bytes,
            threads,
            repetitions: DEFAULT_TRIAD_REPETITIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaseConfig {
    pub working_set_bytes: u64,
    /// Dependent loads per timed repetition; defaults to one full cycle, at
    /// least 2^20.
    pub loads: Option<u64>,
    pub repetitions: usize,
    pub seed: u64,
    /// Last-level cache size for the validity check.
    pub llc_bytes: Option<u64>,
}

impl ChaseConfig {
    pub fn new(working_set_bytes: u64, seed: u64, llc_bytes: Option<u64>) -> Self {
        ChaseConfig {
            working_set_bytes,
            loads: None,
            repetitions: 3,
            seed,
            llc_bytes,
        }
    }
}

fn self_pid() -> u32 {
    std::process::id()
}

fn node_delta(before: &BTreeMap<NodeId, u64>, after: &BTreeMap<NodeId, u64>) -> BTreeMap<NodeId, u64> {
    after
        .iter()
        .map(|(n, &a)| (*n, a.saturating_sub(before.get(n).copied().unwrap_or(0))))
        .filter(|(_, d)| *d > 0)
        .collect()
}

/// Notes placement outside the composition's node set. Returns false when the
/// stray share exceeds the tolerance.
fn check_placement(c: &Composition, pages: &BTreeMap<NodeId, u64>, notes: &mut Vec<String>) -> bool {
    let allowed = match c.memory_policy() {
        MemPolicy::Default => return true,
        p => p.nodes(),
    };
    let total: u64 = pages.values().sum();
    if total == 0 {
        notes.push("no probe pages observed in numa_maps".into());
        return false;
    }
    let stray: u64 = pages.iter().filter(|(n, _)| !allowed.contains(n)).map(|(_, p)| p).sum();
    let share = stray as f64 / total as f64;
    if share > PLACEMENT_TOLERANCE {
        notes.push(format!("{:.1}% of probe pages outside nodes {allowed:?}", share * 100.0));
        false
    } else {
        true
    }
}

/// STREAM triad `a[i] = b[i] + s * c[i]` under `active`, best of
/// `repetitions` passes.
pub fn triad(active: &ActiveComposition, cfg: &TriadConfig) -> Result<ProbeResult, ProbeError> {
    if cfg.threads == 0 || cfg.repetitions == 0 {
        return Err(ProbeError::Invalid("threads and repetitions must be at least 1".into()));
    }
    let n = (cfg.working_set_bytes / TRIAD_BYTES_PER_ELEMENT) as usize;
    if n < cfg.threads {
        return Err(ProbeError::Invalid(format!(
            "working set of {} bytes is too small for {} threads",
            cfg.working_set_bytes, cfg.threads
        )));
    }
    let _armed = active.enter_current_thread()?;
    let before = procfs::read_node_pages(self_pid())?;

    // Zeroed allocations are not faulted in until the threads initialise
    // their own partitions below.
    let mut a = vec![0.0f64; n];
    let mut b = vec![0.0f64; n];
    let mut c = vec![0.0f64; n];
    let chunk = n.div_ceil(cfg.threads);
    let team = cfg.threads;
    let start = Barrier::new(team + 1);
    let end = Barrier::new(team + 1);
    let init_done = Barrier::new(team + 1);
    let placement_read = Barrier::new(team + 1);
    let mut samples = Vec::with_capacity(cfg.repetitions);
    let mut placement = Ok(BTreeMap::new());

    std::thread::scope(|s| {
        for ((pa, pb), pc) in a.chunks_mut(chunk).zip(b.chunks_mut(chunk)).zip(c.chunks_mut(chunk)) {
            let (start, end, init_done, placement_read) = (&start, &end, &init_done, &placement_read);
            s.spawn(move || {
                for ((x, y), z) in pa.iter_mut().zip(pb.iter_mut()).zip(pc.iter_mut()) {
                    *x = 0.0;
                    *y = TRIAD_B;
                    *z = TRIAD_C;
                }
                init_done.wait();
                placement_read.wait();
                for _ in 0..cfg.repetitions {
                    start.wait();
                    for i in 0..pa.len() {
                        pa[i] = pb[i] + TRIAD_SCALAR * pc[i];
                    }
                    end.wait();
                }
            });
        }
        // Fewer chunks than threads can occur when n is not a multiple.
        let spawned = n.div_ceil(chunk);
        for _ in spawned..team {
            let (start, end, init_done, placement_read) = (&start, &end, &init_done, &placement_read);
            s.spawn(move || {
                init_done.wait();
                placement_read.wait();
                for _ in 0..cfg.repetitions {
                    start.wait();
                    end.wait();
                }
            });
        }
        init_done.wait();
        placement = procfs::read_node_pages(self_pid());
        placement_read.wait();
        for _ in 0..cfg.repetitions {
            start.wait();
            let t0 = Instant::now();
            end.wait();
            let secs = t0.elapsed().as_secs_f64();
            samples.push((n as u64 * TRIAD_BYTES_PER_ELEMENT) as f64 / secs / 1e9);
        }
    });

    let expected = TRIAD_B + TRIAD_SCALAR * TRIAD_C;
    if let Some((index, &got)) = a.iter().enumerate().find(|(_, &x)| x != expected) {
        return Err(ProbeError::Validation { index, got, expected });
    }
    let placement_pages = node_delta(&before, &placement?);
    let mut notes = Vec::new();
    let valid = check_placement(&active.composition, &placement_pages, &mut notes);
    let best = samples.iter().copied().fold(0.0, f64::max);
    Ok(ProbeResult {
        kind: ProbeKind::Triad,
        composition_label: active.composition.label(),
        composition: Some(active.composition.clone()),
        value: best,
        unit: "GB/s".into(),
        working_set_bytes: n as u64 * TRIAD_BYTES_PER_ELEMENT,
        threads: cfg.threads,
        samples,
        seed: None,
        placement_pages,
        valid,
        notes,
        accounting: Some(TRIAD_ACCOUNTING.into()),
    })
}

#[repr(C, align(64))]
#[derive(Clone, Copy)]
struct ChaseNode {
    next: usize,
    _pad: [usize; CHASE_NODE_BYTES / 8 - 1],
}

/// Sattolo's algorithm: a uniformly random permutation consisting of a single
/// cycle, written as `next[i] = successor of i`.
pub fn sattolo_cycle(n: usize, seed: u64) -> Vec<usize> {
    let mut next: Vec<usize> = (0..n).collect();
    sattolo_in_place(n, seed, |i| &mut next[i] as *mut usize);
    next
}

fn sattolo_in_place(n: usize, seed: u64, mut slot: impl FnMut(usize) -> *mut usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        // SAFETY: i != j and both are in bounds of the caller's storage.
        unsafe { std::ptr::swap(slot(i), slot(j)) };
    }
}

/// Length of the cycle through 0, or `None` if the walk does not return to 0
/// within `next.len()` steps.
pub fn cycle_length(next: &[usize]) -> Option<usize> {
    let mut i = 0;
    for steps in 1..=next.len() {
        i = *next.get(i)?;
        if i == 0 {
            return Some(steps);
        }
    }
    None
}

/// Walks a single-cycle random permutation of cache-line nodes with fully
/// dependent loads; reports the best of `repetitions` in ns per load.
pub fn chase(active: &ActiveComposition, cfg: &ChaseConfig) -> Result<ProbeResult, ProbeError> {
    let n = (cfg.working_set_bytes / CHASE_NODE_BYTES as u64) as usize;
    if n < 2 || cfg.repetitions == 0 {
        return Err(ProbeError::Invalid("chase needs at least two nodes and one repetition".into()));
    }
    let _armed = active.enter_current_thread()?;
    let before = procfs::read_node_pages(self_pid())?;
    let mut nodes = vec![
        ChaseNode {
            next: 0,
            _pad: [0; CHASE_NODE_BYTES / 8 - 1],
        };
        n
    ];
    for (i, node) in nodes.iter_mut().enumerate() {
        node.next = i;
    }
    let base = nodes.as_mut_ptr();
    // SAFETY: indices passed by sattolo_in_place are < n.
    sattolo_in_place(n, cfg.seed, |i| unsafe { &mut (*base.add(i)).next as *mut usize });
    let placement_pages = node_delta(&before, &procfs::read_node_pages(self_pid())?);

    let loads = cfg.loads.unwrap_or((n as u64).max(1 << 20));
    let mut samples = Vec::with_capacity(cfg.repetitions);
    let mut i = 0usize;
    for _ in 0..cfg.repetitions {
        let t0 = Instant::now();
        for _ in 0..loads {
            // SAFETY: every next index is < n by construction.
            i = unsafe { (*nodes.as_ptr().add(i)).next };
        }
        let ns = t0.elapsed().as_nanos() as f64;
        std::hint::black_box(i);
        samples.push(ns / loads as f64);
    }

    let mut notes = Vec::new();
    let mut valid = check_placement(&active.composition, &placement_pages, &mut notes);
    match cfg.llc_bytes {
        Some(llc) if (n * CHASE_NODE_BYTES) as u64 >= CHASE_LLC_MULTIPLE * llc => {}
        Some(llc) => {
            valid = false;
            notes.push(format!(
                "working set {} bytes is below {CHASE_LLC_MULTIPLE} x last-level cache ({llc} bytes); latency is cache-resident",
                n * CHASE_NODE_BYTES
            ));
        }
        None => notes.push("last-level cache size unknown; cache residency not checked".into()),
    }
    let best = samples.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ProbeResult {
        kind: ProbeKind::Chase,
        composition_label: active.composition.label(),
        composition: Some(active.composition.clone()),
        value: best,
        unit: "ns".into(),
        working_set_bytes: (n * CHASE_NODE_BYTES) as u64,
        threads: 1,
        samples,
        seed: Some(cfg.seed),
        placement_pages,
        valid,
        notes,
        accounting: None,
    })
}
