//! NUMA topology of the host, read from `/sys/devices/system/node`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::procfs::{page_size_kib, NodeId};

const NODE_ROOT: &str = "/sys/devices/system/node";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: NodeId,
    pub cpus: Vec<usize>,
    pub total_bytes: u64,
    pub free_bytes: u64,
}

impl NodeInfo {
    pub fn has_memory(&self) -> bool {
        self.total_bytes > 0
    }
}

/// Machine description recorded in every output header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: BTreeMap<NodeId, NodeInfo>,
    pub page_size_bytes: u64,
    /// Size of the largest CPU cache level, used to size latency probes.
    pub llc_bytes: Option<u64>,
}

impl Topology {
    /// Reads the live topology. A kernel without NUMA support is reported as a
    /// single node holding every CPU and all of memory.
    pub fn discover() -> Topology {
        Self::from_sysfs(Path::new(NODE_ROOT)).unwrap_or_else(Self::flat)
    }

    pub fn from_sysfs(root: &Path) -> Option<Topology> {
        let mut nodes = BTreeMap::new();
        for entry in fs::read_dir(root).ok()?.flatten() {
            let name = entry.file_name();
            let Some(id) = name.to_str().and_then(|s| s.strip_prefix("node")).and_then(|s| s.parse().ok()) else {
                continue;
            };
            let dir = entry.path();
            let cpus = fs::read_to_string(dir.join("cpulist"))
                .ok()
                .and_then(|s| parse_cpu_list(&s))
                .unwrap_or_default();
            let meminfo = fs::read_to_string(dir.join("meminfo")).unwrap_or_default();
            let (total_bytes, free_bytes) = parse_node_meminfo(&meminfo);
            nodes.insert(
                id,
                NodeInfo {
                    id,
                    cpus,
                    total_bytes,
                    free_bytes,
                },
            );
        }
        if nodes.is_empty() {
            return None;
        }
        Some(Topology {
            nodes,
            page_size_bytes: page_size_kib() * 1024,
            llc_bytes: largest_cache_bytes(Path::new("/sys/devices/system/cpu/cpu0/cache")),
        })
    }

    fn flat() -> Topology {
        let (total_bytes, free_bytes) = fs::read_to_string("/proc/meminfo")
            .map(|s| parse_meminfo_totals(&s))
            .unwrap_or((0, 0));
        let ncpu = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let node = NodeInfo {
            id: 0,
            cpus: (0..ncpu).collect(),
            total_bytes,
            free_bytes,
        };
        Topology {
            nodes: BTreeMap::from([(0, node)]),
            page_size_bytes: page_size_kib() * 1024,
            llc_bytes: None,
        }
    }

    /// Builds a synthetic topology; used by planners and tests that must not
    /// depend on the build machine.
    pub fn synthetic(node_count: u32, cpus_per_node: usize, bytes_per_node: u64) -> Topology {
        let nodes = (0..node_count)
            .map(|id| {
                let first = id as usize * cpus_per_node;
                (
                    id,
                    NodeInfo {
                        id,
                        cpus: (first..first + cpus_per_node).collect(),
                        total_bytes: bytes_per_node,
                        free_bytes: bytes_per_node,
                    },
                )
            })
            .collect();
        Topology {
            nodes,
            page_size_bytes: 4096,
            llc_bytes: None,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes that have memory attached.
    pub fn memory_nodes(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.has_memory()).map(|n| n.id).collect()
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeInfo> {
        self.nodes.get(&id)
    }
}

/// Current free bytes on `node`.
pub fn node_free_bytes(node: NodeId) -> Option<u64> {
    let path = PathBuf::from(NODE_ROOT).join(format!("node{node}")).join("meminfo");
    match fs::read_to_string(path) {
        Ok(text) => Some(parse_node_meminfo(&text).1),
        Err(_) if node == 0 => fs::read_to_string("/proc/meminfo")
            .ok()
            .map(|s| parse_meminfo_totals(&s).1),
        Err(_) => None,
    }
}

/// Parses a kernel cpulist such as `0-3,8,10-11`.
pub fn parse_cpu_list(text: &str) -> Option<Vec<usize>> {
    let mut cpus = Vec::new();
    for part in text.trim().split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let lo: usize = lo.parse().ok()?;
                let hi: usize = hi.parse().ok()?;
                if hi < lo {
                    return None;
                }
                cpus.extend(lo..=hi);
            }
            None => cpus.push(part.parse().ok()?),
        }
    }
    Some(cpus)
}

/// (MemTotal, MemFree) in bytes from a per-node meminfo file
/// (`Node 0 MemFree:   123 kB`).
pub fn parse_node_meminfo(text: &str) -> (u64, u64) {
    let mut total = 0;
    let mut free = 0;
    for line in text.lines() {
        let mut it = line.split_whitespace();
        if it.next() != Some("Node") {
            continue;
        }
        let _id = it.next();
        let key = it.next();
        let value = it.next().and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
        match key {
            Some("MemTotal:") => total = value * 1024,
            Some("MemFree:") => free = value * 1024,
            _ => {}
        }
    }
    (total, free)
}

fn parse_meminfo_totals(text: &str) -> (u64, u64) {
    let mut total = 0;
    let mut free = 0;
    for line in text.lines() {
        let mut it = line.split_whitespace();
        let key = it.next();
        let value = it.next().and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
        match key {
            Some("MemTotal:") => total = value * 1024,
            Some("MemFree:") => free = value * 1024,
            _ => {}
        }
    }
    (total, free)
}

fn largest_cache_bytes(dir: &Path) -> Option<u64> {
    fs::read_dir(dir)
        .ok()?
        .flatten()
        .filter_map(|e| fs::read_to_string(e.path().join("size")).ok())
        .filter_map(|s| parse_size_suffix(s.trim()))
        .max()
}

/// Parses sizes like `32K`, `2048K`, `30M` as used by sysfs cache entries.
pub fn parse_size_suffix(s: &str) -> Option<u64> {
    let (num, mult) = match s.chars().last()? {
        'K' | 'k' => (&s[..s.len() - 1], 1u64 << 10),
        'M' | 'm' => (&s[..s.len() - 1], 1 << 20),
        'G' | 'g' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.trim().parse::<u64>().ok().map(|n| n * mult)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpu_lists() {
        assert_eq!(parse_cpu_list("0-3,8,10-11\n"), Some(vec![0, 1, 2, 3, 8, 10, 11]));
        assert_eq!(parse_cpu_list(""), Some(vec![]));
        assert_eq!(parse_cpu_list("3-1"), None);
    }

    #[test]
    fn node_meminfo() {
        let text = "Node 1 MemTotal:  1000 kB\nNode 1 MemFree:   400 kB\nNode 1 MemUsed: 600 kB\n";
        assert_eq!(parse_node_meminfo(text), (1000 * 1024, 400 * 1024));
    }

    #[test]
    fn sysfs_tree() {
        let dir = tempfile::tempdir().unwrap();
        for (id, cpus) in [(0, "0-1"), (1, "2-3")] {
            let node = dir.path().join(format!("node{id}"));
            fs::create_dir(&node).unwrap();
            fs::write(node.join("cpulist"), cpus).unwrap();
            fs::write(
                node.join("meminfo"),
                format!("Node {id} MemTotal: 2048 kB\nNode {id} MemFree: 1024 kB\n"),
            )
            .unwrap();
        }
        fs::write(dir.path().join("online"), "0-1").unwrap();
        let topo = Topology::from_sysfs(dir.path()).unwrap();
        assert_eq!(topo.node_count(), 2);
        assert_eq!(topo.node(1).unwrap().cpus, vec![2, 3]);
        assert_eq!(topo.node(1).unwrap().free_bytes, 1024 * 1024);
    }

    #[test]
    fn live_topology_has_a_node() {
        let topo = Topology::discover();
        assert!(topo.node_count() >= 1);
        assert!(!topo.memory_nodes().is_empty());
    }

    #[test]
    fn cache_sizes() {
        assert_eq!(parse_size_suffix("32K"), Some(32 * 1024));
        assert_eq!(parse_size_suffix("30M"), Some(30 << 20));
        assert_eq!(parse_size_suffix("x"), None);
    }
}
