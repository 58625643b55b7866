//! Per-process memory accounting read from `/proc/<pid>`.
//!
//! Three files are involved: `smaps_rollup` (Rss, Pss, Referenced, Swap),
//! `numa_maps` (resident pages per NUMA node) and `clear_refs` (write-only,
//! resets the Accessed/Referenced state of every page of the process).
//!
//! The parsers are pure functions over file contents so they can be driven
//! from fixtures; the `read_*` functions wrap them with the I/O and map OS
//! errors onto [`ProcfsError`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Process identifier as used in `/proc`.
pub type Pid = u32;

/// NUMA node identifier.
pub type NodeId = u32;

/// Lowest kernel that ships `smaps_rollup`.
pub const MIN_KERNEL: (u32, u32) = (4, 14);

#[derive(Debug, Error)]
pub enum ProcfsError {
    #[error("process {0} is gone")]
    ProcessGone(Pid),
    #[error("permission denied accessing {0}")]
    PermissionDenied(PathBuf),
    #[error("cannot parse {what}: {detail}")]
    ParseError { what: &'static str, detail: String },
    #[error("kernel {found} is older than {}.{}; smaps_rollup is unavailable", MIN_KERNEL.0, MIN_KERNEL.1)]
    KernelTooOld { found: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ProcfsError {
    fn parse(what: &'static str, detail: impl Into<String>) -> Self {
        ProcfsError::ParseError {
            what,
            detail: detail.into(),
        }
    }
}

/// One timestamped sample of a process's memory accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemSnapshot {
    /// Monotonic nanoseconds since supervision start.
    pub timestamp_ns: u64,
    pub rss_kib: u64,
    pub pss_kib: u64,
    pub referenced_kib: u64,
    pub swap_kib: u64,
    /// Resident pages per node, in base pages.
    #[serde(default)]
    pub node_pages: BTreeMap<NodeId, u64>,
}

impl MemSnapshot {
    pub fn total_node_pages(&self) -> u64 {
        self.node_pages.values().sum()
    }
}

/// Fields parsed from `smaps_rollup`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RollupStats {
    pub rss_kib: u64,
    pub pss_kib: u64,
    pub referenced_kib: u64,
    pub swap_kib: u64,
    /// Fields the file did not carry and that were defaulted to zero.
    pub missing: MissingFields,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MissingFields {
    pub pss: bool,
    pub referenced: bool,
    pub swap: bool,
}

impl MissingFields {
    pub fn any(&self) -> bool {
        self.pss || self.referenced || self.swap
    }
}

/// Parses the contents of `/proc/<pid>/smaps_rollup`.
///
/// The optional first line is the synthetic `[rollup]` VMA header. Every
/// other line must be `Key: <n> kB`. `Rss` is mandatory; `Pss`,
/// `Referenced` and `Swap` default to zero when absent and are reported in
/// [`RollupStats::missing`].
pub fn parse_smaps_rollup(text: &str) -> Result<RollupStats, ProcfsError> {
    const WHAT: &str = "smaps_rollup";
    let mut rss = None;
    let mut pss = None;
    let mut referenced = None;
    let mut swap = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 && line.ends_with("[rollup]") {
            continue;
        }
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| ProcfsError::parse(WHAT, format!("line {}: no key: {line:?}", lineno + 1)))?;
        let mut parts = rest.split_whitespace();
        let value = parts
            .next()
            .ok_or_else(|| ProcfsError::parse(WHAT, format!("line {}: no value for {key}", lineno + 1)))?;
        let value: u64 = value
            .parse()
            .map_err(|_| ProcfsError::parse(WHAT, format!("line {}: bad number {value:?}", lineno + 1)))?;
        match parts.next() {
            Some("kB") => {}
            other => {
                return Err(ProcfsError::parse(
                    WHAT,
                    format!("line {}: expected unit kB, found {other:?}", lineno + 1),
                ))
            }
        }
        if parts.next().is_some() {
            return Err(ProcfsError::parse(WHAT, format!("line {}: trailing tokens", lineno + 1)));
        }
        let slot = match key {
            "Rss" => &mut rss,
            "Pss" => &mut pss,
            "Referenced" => &mut referenced,
            "Swap" => &mut swap,
            _ => continue,
        };
        if slot.replace(value).is_some() {
            return Err(ProcfsError::parse(WHAT, format!("duplicate field {key}")));
        }
    }

    let rss_kib = rss.ok_or_else(|| ProcfsError::parse(WHAT, "no Rss field"))?;
    Ok(RollupStats {
        rss_kib,
        pss_kib: pss.unwrap_or(0),
        referenced_kib: referenced.unwrap_or(0),
        swap_kib: swap.unwrap_or(0),
        missing: MissingFields {
            pss: pss.is_none(),
            referenced: referenced.is_none(),
            swap: swap.is_none(),
        },
    })
}

/// Parses the contents of `/proc/<pid>/numa_maps`, summing the `N<node>=<pages>`
/// tokens of every mapping.
///
/// Counts are converted to base pages of `base_page_kib` using the mapping's
/// `kernelpagesize_kB` token, so hugetlb mappings are not undercounted.
pub fn parse_numa_maps(text: &str, base_page_kib: u64) -> Result<BTreeMap<NodeId, u64>, ProcfsError> {
    const WHAT: &str = "numa_maps";
    let mut totals: BTreeMap<NodeId, u64> = BTreeMap::new();
    let base_page_kib = base_page_kib.max(1);

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let addr = tokens.next().unwrap_or_default();
        if addr.is_empty() || !addr.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ProcfsError::parse(
                WHAT,
                format!("line {}: bad mapping address {addr:?}", lineno + 1),
            ));
        }
        if tokens.next().is_none() {
            return Err(ProcfsError::parse(WHAT, format!("line {}: missing policy", lineno + 1)));
        }

        let mut per_node: Vec<(NodeId, u64)> = Vec::new();
        let mut page_kib = base_page_kib;
        for tok in tokens {
            if let Some(v) = tok.strip_prefix("kernelpagesize_kB=") {
                page_kib = v.parse().map_err(|_| {
                    ProcfsError::parse(WHAT, format!("line {}: bad page size {v:?}", lineno + 1))
                })?;
                continue;
            }
            let Some(rest) = tok.strip_prefix('N') else {
                continue;
            };
            let Some((node, pages)) = rest.split_once('=') else {
                continue;
            };
            if node.is_empty() || !node.bytes().all(|b| b.is_ascii_digit()) {
                continue;
            }
            let node: NodeId = node
                .parse()
                .map_err(|_| ProcfsError::parse(WHAT, format!("line {}: bad node id in {tok:?}", lineno + 1)))?;
            let pages: u64 = pages
                .parse()
                .map_err(|_| ProcfsError::parse(WHAT, format!("line {}: bad page count in {tok:?}", lineno + 1)))?;
            per_node.push((node, pages));
        }

        let scale = (page_kib / base_page_kib).max(1);
        for (node, pages) in per_node {
            *totals.entry(node).or_default() += pages * scale;
        }
    }
    Ok(totals)
}

fn proc_path(pid: Pid, file: &str) -> PathBuf {
    Path::new("/proc").join(pid.to_string()).join(file)
}

fn map_io(pid: Pid, path: PathBuf, err: io::Error) -> ProcfsError {
    match err.raw_os_error() {
        Some(libc::ESRCH) | Some(libc::ENOENT) => ProcfsError::ProcessGone(pid),
        Some(libc::EACCES) | Some(libc::EPERM) => ProcfsError::PermissionDenied(path),
        _ => ProcfsError::Io { path, source: err },
    }
}

fn read_proc_file(pid: Pid, file: &str) -> Result<String, ProcfsError> {
    let path = proc_path(pid, file);
    fs::read_to_string(&path).map_err(|e| map_io(pid, path, e))
}

/// Reads Rss/Pss/Referenced/Swap for `pid`. The returned snapshot has
/// `timestamp_ns = 0` and no node pages; callers fill those in.
pub fn read_mem_stats(pid: Pid) -> Result<MemSnapshot, ProcfsError> {
    let text = read_proc_file(pid, "smaps_rollup")?;
    if text.trim().is_empty() {
        // The address space is torn down once the task has exited.
        return Err(ProcfsError::ProcessGone(pid));
    }
    let stats = parse_smaps_rollup(&text)?;
    if stats.missing.any() {
        warn!("pid {pid}: smaps_rollup lacks fields {:?}; defaulting to 0", stats.missing);
    }
    Ok(MemSnapshot {
        timestamp_ns: 0,
        rss_kib: stats.rss_kib,
        pss_kib: stats.pss_kib,
        referenced_kib: stats.referenced_kib,
        swap_kib: stats.swap_kib,
        node_pages: BTreeMap::new(),
    })
}

/// Resident pages per NUMA node for `pid`, in base pages.
pub fn read_node_pages(pid: Pid) -> Result<BTreeMap<NodeId, u64>, ProcfsError> {
    let text = read_proc_file(pid, "numa_maps")?;
    parse_numa_maps(&text, page_size_kib())
}

/// Full snapshot (rollup plus node pages), stamped with `timestamp_ns`.
pub fn snapshot(pid: Pid, timestamp_ns: u64) -> Result<MemSnapshot, ProcfsError> {
    let mut snap = read_mem_stats(pid)?;
    snap.node_pages = read_node_pages(pid)?;
    snap.timestamp_ns = timestamp_ns;
    Ok(snap)
}

/// Clears the Accessed/Referenced state of every page of `pid`.
pub fn clear_referenced(pid: Pid) -> Result<(), ProcfsError> {
    let path = proc_path(pid, "clear_refs");
    let mut file = fs::OpenOptions::new()
        .write(true)
        .open(&path)
        .map_err(|e| map_io(pid, path.clone(), e))?;
    // "1" resets referenced bits on all pages, anonymous and file-backed.
    file.write_all(b"1").map_err(|e| map_io(pid, path, e))
}

/// System base page size in KiB.
pub fn page_size_kib() -> u64 {
    static PAGE: OnceLock<u64> = OnceLock::new();
    *PAGE.get_or_init(|| {
        // SAFETY: sysconf has no memory-safety preconditions.
        let bytes = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        if bytes > 0 {
            bytes as u64 / 1024
        } else {
            4
        }
    })
}

/// Parses `major.minor` from a kernel release string such as `6.8.0-45-generic`.
pub fn parse_kernel_release(release: &str) -> Option<(u32, u32)> {
    let mut it = release.split(|c: char| !c.is_ascii_digit());
    let major = it.next()?.parse().ok()?;
    let minor = it.next()?.parse().ok()?;
    Some((major, minor))
}

/// Fails with [`ProcfsError::KernelTooOld`] when the running kernel predates
/// `smaps_rollup`.
pub fn check_kernel() -> Result<(), ProcfsError> {
    let release = fs::read_to_string("/proc/sys/kernel/osrelease")
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    match parse_kernel_release(&release) {
        Some(v) if v >= MIN_KERNEL => Ok(()),
        Some(_) => Err(ProcfsError::KernelTooOld { found: release }),
        None if Path::new("/proc/self/smaps_rollup").exists() => Ok(()),
        None => Err(ProcfsError::KernelTooOld { found: release }),
    }
}

/// Parent pid from `/proc/<pid>/stat`.
pub fn parent_pid(pid: Pid) -> Result<Pid, ProcfsError> {
    let stat = read_proc_file(pid, "stat")?;
    // comm may contain spaces and parentheses; fields resume after the last ')'.
    let rest = stat
        .rsplit_once(')')
        .map(|(_, r)| r)
        .ok_or_else(|| ProcfsError::parse("stat", "no comm terminator"))?;
    let mut fields = rest.split_whitespace();
    let _state = fields.next();
    fields
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| ProcfsError::parse("stat", "no ppid"))
}

/// All live descendants of `root` (not including `root`), in pid order.
pub fn descendants(root: Pid) -> Vec<Pid> {
    let Ok(dir) = fs::read_dir("/proc") else {
        return Vec::new();
    };
    let mut parent_of: BTreeMap<Pid, Pid> = BTreeMap::new();
    for entry in dir.flatten() {
        let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<Pid>().ok()) else {
            continue;
        };
        if let Ok(ppid) = parent_pid(pid) {
            parent_of.insert(pid, ppid);
        }
    }
    parent_of
        .keys()
        .copied()
        .filter(|&pid| {
            let mut cur = pid;
            for _ in 0..parent_of.len() {
                match parent_of.get(&cur) {
                    Some(&p) if p == root => return true,
                    Some(&p) if p != 0 && p != cur => cur = p,
                    _ => return false,
                }
            }
            false
        })
        .collect()
}

/// Environment variables that carry the rank of an MPI process, across the
/// common launchers.
pub const RANK_ENV_VARS: &[&str] = &["OMPI_COMM_WORLD_RANK", "PMI_RANK", "PMIX_RANK", "SLURM_PROCID", "MPI_RANK"];

/// MPI rank of `pid` as advertised in its initial environment, if any.
pub fn mpi_rank(pid: Pid) -> Option<u32> {
    let path = proc_path(pid, "environ");
    let raw = fs::read(path).ok()?;
    rank_from_environ(&raw)
}

pub fn rank_from_environ(raw: &[u8]) -> Option<u32> {
    for entry in raw.split(|&b| b == 0) {
        let Ok(entry) = std::str::from_utf8(entry) else {
            continue;
        };
        let Some((key, value)) = entry.split_once('=') else {
            continue;
        };
        if RANK_ENV_VARS.contains(&key) {
            if let Ok(rank) = value.trim().parse() {
                return Some(rank);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_the_four_fields() {
        let text = "Rss: 1024 kB\nPss: 512 kB\nReferenced: 768 kB\n";
        let s = parse_smaps_rollup(text).unwrap();
        assert_eq!((s.rss_kib, s.pss_kib, s.referenced_kib, s.swap_kib), (1024, 512, 768, 0));
        assert!(s.missing.swap && !s.missing.pss && !s.missing.referenced);
    }

    #[test]
    fn zero_page_rollup_is_all_zero() {
        let text = "00400000-7fff00000000 ---p 00000000 00:00 0 [rollup]\n\
                    Rss: 0 kB\nPss: 0 kB\nReferenced: 0 kB\nSwap: 0 kB\n";
        let s = parse_smaps_rollup(text).unwrap();
        assert_eq!((s.rss_kib, s.pss_kib, s.referenced_kib, s.swap_kib), (0, 0, 0, 0));
        assert!(!s.missing.any());
    }

    #[test]
    fn rollup_rejects_garbage() {
        for bad in [
            "",
            "Pss: 1 kB\n",
            "Rss: x kB\n",
            "Rss: 10 MB\n",
            "Rss 10 kB\n",
            "Rss: 10 kB\nRss: 11 kB\n",
            "Rss: 10 kB extra\n",
        ] {
            assert!(
                matches!(parse_smaps_rollup(bad), Err(ProcfsError::ParseError { .. })),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn numa_maps_sums_across_mappings() {
        let text = "7f0000000000 default anon=15 dirty=15 N0=10 N1=5 kernelpagesize_kB=4\n\
                    7f0000100000 default file=/lib/x.so mapped=2 N0=2 kernelpagesize_kB=4\n";
        let m = parse_numa_maps(text, 4).unwrap();
        assert_eq!(m, BTreeMap::from([(0, 12), (1, 5)]));
    }

    #[test]
    fn numa_maps_scales_huge_pages() {
        let text = "7f0000000000 default file=/mnt/huge/x huge dirty=2 N1=2 kernelpagesize_kB=2048\n";
        let m = parse_numa_maps(text, 4).unwrap();
        assert_eq!(m, BTreeMap::from([(1, 1024)]));
    }

    #[test]
    fn numa_maps_empty_and_no_resident_pages() {
        assert!(parse_numa_maps("", 4).unwrap().is_empty());
        let text = "7ffd00000000 default stack anon=0 kernelpagesize_kB=4\n";
        assert!(parse_numa_maps(text, 4).unwrap().is_empty());
    }

    #[test]
    fn numa_maps_rejects_bad_tokens() {
        assert!(parse_numa_maps("zzz default N0=1\n", 4).is_err());
        assert!(parse_numa_maps("7f00 default N0=abc\n", 4).is_err());
        assert!(parse_numa_maps("7f00\n", 4).is_err());
    }

    #[test]
    fn kernel_release_parsing() {
        assert_eq!(parse_kernel_release("4.14.0-rc1"), Some((4, 14)));
        assert_eq!(parse_kernel_release("6.18.44-fc-v139"), Some((6, 18)));
        assert_eq!(parse_kernel_release("garbage"), None);
        assert!((4, 9) < MIN_KERNEL && (5, 0) > MIN_KERNEL);
    }

    #[test]
    fn rank_env_lookup() {
        assert_eq!(rank_from_environ(b"PATH=/bin\0PMI_RANK=3\0"), Some(3));
        assert_eq!(rank_from_environ(b"OMPI_COMM_WORLD_RANK=0\0"), Some(0));
        assert_eq!(rank_from_environ(b"HOME=/root\0"), None);
    }

    #[test]
    fn reads_own_process() {
        let pid = std::process::id();
        let s = read_mem_stats(pid).unwrap();
        assert!(s.rss_kib > 0);
        assert!(s.pss_kib <= s.rss_kib);
        assert!(s.referenced_kib <= s.rss_kib);
        assert!(!read_node_pages(pid).unwrap().is_empty());
    }

    #[test]
    fn missing_process_is_gone() {
        // pid_max never reaches this value.
        let pid = 0x7fff_fff0;
        assert!(matches!(read_mem_stats(pid), Err(ProcfsError::ProcessGone(_))));
        assert!(matches!(read_node_pages(pid), Err(ProcfsError::ProcessGone(_))));
        assert!(matches!(clear_referenced(pid), Err(ProcfsError::ProcessGone(_))));
    }
}
