//! CPU affinity and NUMA memory policy, as raw syscalls.
//!
//! [`LaunchPolicy`] is fully materialised (fixed-size masks, no heap) so that
//! [`LaunchPolicy::apply_to_current_thread`] can run between `fork` and
//! `exec`, where only async-signal-safe calls are allowed. Both the affinity
//! mask and the memory policy are inherited across `fork`, `clone` and
//! `execve`, which is how a launched workload picks them up.

use std::io;
use std::mem;

use serde::{Deserialize, Serialize};

use crate::procfs::NodeId;

const MPOL_DEFAULT: libc::c_int = 0;
const MPOL_PREFERRED: libc::c_int = 1;
const MPOL_BIND: libc::c_int = 2;
const MPOL_INTERLEAVE: libc::c_int = 3;

const MASK_WORDS: usize = 16;
/// Highest node id representable in a [`LaunchPolicy`].
pub const MAX_NODES: usize = MASK_WORDS * 64;

/// Declarative memory placement policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "nodes")]
pub enum MemPolicy {
    Default,
    /// Allocate only from these nodes, nearest first.
    Bind(Vec<NodeId>),
    /// Prefer this node, fall back elsewhere when full.
    Preferred(NodeId),
    /// Round-robin pages across these nodes.
    Interleave(Vec<NodeId>),
}

impl MemPolicy {
    pub fn nodes(&self) -> Vec<NodeId> {
        match self {
            MemPolicy::Default => Vec::new(),
            MemPolicy::Bind(n) | MemPolicy::Interleave(n) => n.clone(),
            MemPolicy::Preferred(n) => vec![*n],
        }
    }
}

#[derive(Clone, Copy)]
struct NodeMask([libc::c_ulong; MASK_WORDS]);

impl NodeMask {
    fn from_nodes(nodes: &[NodeId]) -> io::Result<Self> {
        let mut words = [0; MASK_WORDS];
        for &n in nodes {
            let n = n as usize;
            if n >= MAX_NODES {
                return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("node {n} out of range")));
            }
            words[n / 64] |= 1 << (n % 64);
        }
        Ok(NodeMask(words))
    }
}

/// Materialised affinity plus memory policy, applied in a launch context.
#[derive(Clone, Copy)]
pub struct LaunchPolicy {
    cpus: Option<libc::cpu_set_t>,
    mode: libc::c_int,
    mask: NodeMask,
}

impl std::fmt::Debug for LaunchPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LaunchPolicy")
            .field("pinned", &self.cpus.is_some())
            .field("mode", &self.mode)
            .finish()
    }
}

impl LaunchPolicy {
    /// No pinning, default memory policy.
    pub fn unrestricted() -> Self {
        LaunchPolicy {
            cpus: None,
            mode: MPOL_DEFAULT,
            mask: NodeMask([0; MASK_WORDS]),
        }
    }

    pub fn new(cpus: &[usize], policy: &MemPolicy) -> io::Result<Self> {
        let cpus = if cpus.is_empty() {
            None
        } else {
            // SAFETY: cpu_set_t is plain data; CPU_ZERO/CPU_SET only touch the set.
            let mut set: libc::cpu_set_t = unsafe { mem::zeroed() };
            for &cpu in cpus {
                if cpu >= libc::CPU_SETSIZE as usize {
                    return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("cpu {cpu} out of range")));
                }
                unsafe { libc::CPU_SET(cpu, &mut set) };
            }
            Some(set)
        };
        let (mode, mask) = match policy {
            MemPolicy::Default => (MPOL_DEFAULT, NodeMask([0; MASK_WORDS])),
            MemPolicy::Bind(n) => (MPOL_BIND, NodeMask::from_nodes(n)?),
            MemPolicy::Preferred(n) => (MPOL_PREFERRED, NodeMask::from_nodes(&[*n])?),
            MemPolicy::Interleave(n) => (MPOL_INTERLEAVE, NodeMask::from_nodes(n)?),
        };
        Ok(LaunchPolicy { cpus, mode, mask })
    }

    /// Applies affinity and memory policy to the calling thread.
    ///
    /// Async-signal-safe: performs two syscalls and nothing else. Returns the
    /// raw errno on failure.
    pub fn apply_to_current_thread(&self) -> Result<(), i32> {
        if let Some(set) = &self.cpus {
            // SAFETY: set points to a valid cpu_set_t of the stated size.
            let rc = unsafe { libc::sched_setaffinity(0, mem::size_of::<libc::cpu_set_t>(), set) };
            if rc != 0 {
                return Err(errno());
            }
        }
        set_mempolicy_raw(self.mode, &self.mask)
    }
}

fn errno() -> i32 {
    // SAFETY: __errno_location always returns a valid thread-local pointer.
    unsafe { *libc::__errno_location() }
}

fn set_mempolicy_raw(mode: libc::c_int, mask: &NodeMask) -> Result<(), i32> {
    let (ptr, maxnode) = if mode == MPOL_DEFAULT {
        (std::ptr::null(), 0)
    } else {
        (mask.0.as_ptr(), (MASK_WORDS * 64 + 1) as libc::c_ulong)
    };
    // SAFETY: ptr is null or points at MASK_WORDS longs; maxnode matches.
    let rc = unsafe { libc::syscall(libc::SYS_set_mempolicy, mode, ptr, maxnode) };
    if rc != 0 {
        Err(errno())
    } else {
        Ok(())
    }
}

/// Affinity and memory policy of the calling thread, for later restore.
pub struct ThreadState {
    cpus: libc::cpu_set_t,
    mode: libc::c_int,
    mask: NodeMask,
}

impl ThreadState {
    pub fn capture() -> io::Result<Self> {
        // SAFETY: zeroed cpu_set_t is a valid empty set; buffers sized correctly.
        let mut cpus: libc::cpu_set_t = unsafe { mem::zeroed() };
        if unsafe { libc::sched_getaffinity(0, mem::size_of::<libc::cpu_set_t>(), &mut cpus) } != 0 {
            return Err(io::Error::last_os_error());
        }
        let mut mode: libc::c_int = 0;
        let mut mask = NodeMask([0; MASK_WORDS]);
        let rc = unsafe {
            libc::syscall(
                libc::SYS_get_mempolicy,
                &mut mode as *mut libc::c_int,
                mask.0.as_mut_ptr(),
                (MASK_WORDS * 64 + 1) as libc::c_ulong,
                std::ptr::null_mut::<libc::c_void>(),
                0 as libc::c_ulong,
            )
        };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(ThreadState { cpus, mode, mask })
    }

    pub fn restore(&self) -> io::Result<()> {
        // SAFETY: as in capture.
        if unsafe { libc::sched_setaffinity(0, mem::size_of::<libc::cpu_set_t>(), &self.cpus) } != 0 {
            return Err(io::Error::last_os_error());
        }
        set_mempolicy_raw(self.mode, &self.mask).map_err(io::Error::from_raw_os_error)
    }
}

/// Memory policy mode and nodes of the calling thread.
pub fn current_policy() -> io::Result<MemPolicy> {
    let state = ThreadState::capture()?;
    let nodes: Vec<NodeId> = (0..MAX_NODES)
        .filter(|&n| state.mask.0[n / 64] & (1 << (n % 64)) != 0)
        .map(|n| n as NodeId)
        .collect();
    Ok(match state.mode {
        MPOL_BIND => MemPolicy::Bind(nodes),
        MPOL_INTERLEAVE => MemPolicy::Interleave(nodes),
        MPOL_PREFERRED => MemPolicy::Preferred(nodes.first().copied().unwrap_or(0)),
        _ => MemPolicy::Default,
    })
}
