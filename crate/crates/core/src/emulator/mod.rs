//! Emulated composable memory subsystems on NUMA hardware.
//!
//! A [`Composition`] names which node plays the host's local memory and which
//! nodes play memory pools reached over CXL links. [`apply_composition`]
//! turns it into an [`ActiveComposition`]: a [`LaunchPolicy`] (CPU pinning
//! plus memory policy) that launched workloads inherit, and any
//! [`LockReservation`]s that shrink the local node to the intended share.
//!
//! | kind                  | memory policy                      | locking          |
//! |-----------------------|------------------------------------|------------------|
//! | `LocalOnly`           | bind `{local}`                     | none             |
//! | `CapacitySplit`       | bind `{local, pool[0]}` local-first| local, by ratio  |
//! | `RemoteOnly`          | bind `{pool[0]}`                   | none             |
//! | `BandwidthInterleave` | interleave `{local?} ∪ pools`      | none             |
//! | `SharedPool`          | interleave `{local} ∪ pools`, or capacity split when a fraction is set |

pub mod lock;
pub mod policy;

use std::io;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lock::LockReservation;
pub use policy::{LaunchPolicy, MemPolicy, ThreadState};

use crate::procfs::NodeId;
use crate::topology::{node_free_bytes, Topology};

/// Slack left unlocked on the local node for the kernel and page cache.
pub const DEFAULT_HEADROOM_BYTES: u64 = 64 << 20;

#[derive(Debug, Error)]
pub enum EmulatorError {
    #[error("composition unsatisfiable: {0}")]
    Unsatisfiable(String),
    #[error("invalid composition: {0}")]
    Invalid(String),
    #[error("partial arming rolled back: {0}")]
    PartialArming(String),
    #[error("{what}: {source}")]
    Os {
        what: &'static str,
        #[source]
        source: io::Error,
    },
}

impl EmulatorError {
    pub(crate) fn os(what: &'static str) -> impl FnOnce(io::Error) -> EmulatorError {
        move |source| EmulatorError::Os { what, source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionKind {
    LocalOnly,
    CapacitySplit,
    RemoteOnly,
    BandwidthInterleave,
    SharedPool,
}

impl CompositionKind {
    fn needs_pool(self) -> bool {
        !matches!(self, CompositionKind::LocalOnly)
    }
}

/// Declarative emulated memory subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub kind: CompositionKind,
    #[serde(default)]
    pub local_node: NodeId,
    #[serde(default)]
    pub pool_nodes: Vec<NodeId>,
    /// Share of the footprint served by the pool (`CapacitySplit`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled_fraction: Option<f64>,
    /// Peak footprint from a prior profile (`CapacitySplit`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_usage_bytes: Option<u64>,
    /// Number of emulated links (`BandwidthInterleave`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_count: Option<u32>,
    /// Whether local memory joins the interleave set.
    #[serde(default = "default_true")]
    pub include_local: bool,
    #[serde(default)]
    pub cpu_binding: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub headroom_bytes: Option<u64>,
}

fn default_true() -> bool {
    true
}

impl Composition {
    fn base(kind: CompositionKind, local: NodeId, pool_nodes: Vec<NodeId>) -> Self {
        Composition {
            kind,
            local_node: local,
            pool_nodes,
            pooled_fraction: None,
            peak_usage_bytes: None,
            link_count: None,
            include_local: true,
            cpu_binding: local,
            headroom_bytes: None,
        }
    }

    pub fn local_only(local: NodeId) -> Self {
        Self::base(CompositionKind::LocalOnly, local, Vec::new())
    }

    pub fn remote_only(local: NodeId, pool: NodeId) -> Self {
        Self::base(CompositionKind::RemoteOnly, local, vec![pool])
    }

    pub fn capacity_split(local: NodeId, pool: NodeId, pooled_fraction: f64, peak_usage_bytes: u64) -> Self {
        Composition {
            pooled_fraction: Some(pooled_fraction),
            peak_usage_bytes: Some(peak_usage_bytes),
            ..Self::base(CompositionKind::CapacitySplit, local, vec![pool])
        }
    }

    pub fn interleave(local: NodeId, pools: Vec<NodeId>, include_local: bool) -> Self {
        Composition {
            link_count: Some(pools.len() as u32),
            include_local,
            ..Self::base(CompositionKind::BandwidthInterleave, local, pools)
        }
    }

    pub fn shared_pool(local: NodeId, pool: NodeId) -> Self {
        Self::base(CompositionKind::SharedPool, local, vec![pool])
    }

    /// Composition used for pooled fraction `f` of a capacity sweep.
    pub fn for_fraction(local: NodeId, pool: NodeId, f: f64, peak_usage_bytes: u64) -> Self {
        if f <= 0.0 {
            Self::local_only(local)
        } else if f >= 1.0 {
            Self::remote_only(local, pool)
        } else {
            Self::capacity_split(local, pool, f, peak_usage_bytes)
        }
    }

    pub fn headroom(&self) -> u64 {
        self.headroom_bytes.unwrap_or(DEFAULT_HEADROOM_BYTES)
    }

    fn uses_capacity_split(&self) -> bool {
        match self.kind {
            CompositionKind::CapacitySplit => true,
            CompositionKind::SharedPool => self.pooled_fraction.is_some(),
            _ => false,
        }
    }

    /// Checks the structural invariants, independent of the host.
    pub fn validate(&self) -> Result<(), EmulatorError> {
        let invalid = |m: String| Err(EmulatorError::Invalid(m));
        if self.cpu_binding != self.local_node {
            return invalid(format!(
                "cpu_binding {} must equal local_node {}",
                self.cpu_binding, self.local_node
            ));
        }
        if self.kind.needs_pool() && self.pool_nodes.is_empty() {
            return invalid(format!("{:?} needs at least one pool node", self.kind));
        }
        if self.pool_nodes.contains(&self.local_node) {
            return invalid("local node may not also be a pool node".into());
        }
        let mut seen = self.pool_nodes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.pool_nodes.len() {
            return invalid("duplicate pool nodes".into());
        }
        if let Some(f) = self.pooled_fraction {
            if !(0.0..=1.0).contains(&f) {
                return invalid(format!("pooled_fraction {f} outside [0, 1]"));
            }
        }
        if self.uses_capacity_split() {
            match (self.pooled_fraction, self.peak_usage_bytes) {
                (Some(f), Some(p)) if f > 0.0 && f < 1.0 && p > 0 => {}
                (f, p) => {
                    return invalid(format!(
                        "capacity split needs 0 < pooled_fraction < 1 and peak_usage_bytes > 0 (got {f:?}, {p:?})"
                    ))
                }
            }
        }
        if self.kind == CompositionKind::BandwidthInterleave {
            match self.link_count {
                Some(n) if n >= 1 && n as usize == self.pool_nodes.len() => {}
                n => {
                    return invalid(format!(
                        "link_count {n:?} must be >= 1 and equal the {} pool nodes",
                        self.pool_nodes.len()
                    ))
                }
            }
        }
        Ok(())
    }

    /// Checks that every referenced node exists on `topo` with memory, and the
    /// local node has CPUs.
    pub fn check_satisfiable(&self, topo: &Topology) -> Result<(), EmulatorError> {
        self.validate()?;
        let unsat = |m: String| Err(EmulatorError::Unsatisfiable(m));
        if self.kind.needs_pool() && topo.memory_nodes().len() < 2 {
            return unsat(format!(
                "{:?} needs at least 2 NUMA nodes with memory; host has {}",
                self.kind,
                topo.memory_nodes().len()
            ));
        }
        let Some(local) = topo.node(self.local_node) else {
            return unsat(format!("local node {} does not exist", self.local_node));
        };
        if local.cpus.is_empty() {
            return unsat(format!("local node {} has no CPUs", self.local_node));
        }
        for n in std::iter::once(&self.local_node).chain(&self.pool_nodes) {
            match topo.node(*n) {
                Some(info) if info.has_memory() => {}
                Some(_) => return unsat(format!("node {n} has no memory")),
                None => return unsat(format!("node {n} does not exist")),
            }
        }
        Ok(())
    }

    /// Memory policy the workload runs under.
    pub fn memory_policy(&self) -> MemPolicy {
        use CompositionKind::*;
        if self.uses_capacity_split() {
            return MemPolicy::Bind(vec![self.local_node, self.pool_nodes[0]]);
        }
        match self.kind {
            LocalOnly => MemPolicy::Bind(vec![self.local_node]),
            RemoteOnly => MemPolicy::Bind(vec![self.pool_nodes[0]]),
            BandwidthInterleave | SharedPool => MemPolicy::Interleave(self.interleave_set()),
            CapacitySplit => unreachable!(),
        }
    }

    /// Node set used by interleaving kinds.
    pub fn interleave_set(&self) -> Vec<NodeId> {
        let mut set = Vec::with_capacity(self.pool_nodes.len() + 1);
        if self.include_local || self.kind == CompositionKind::SharedPool {
            set.push(self.local_node);
        }
        set.extend(&self.pool_nodes);
        set
    }

    /// Short human-readable label, e.g. `capacity_split(0.50)`.
    pub fn label(&self) -> String {
        match self.kind {
            CompositionKind::CapacitySplit => format!("capacity_split({:.2})", self.pooled_fraction.unwrap_or(0.0)),
            CompositionKind::BandwidthInterleave => format!("interleave({} links)", self.pool_nodes.len()),
            k => format!("{k:?}"),
        }
    }
}

/// Bytes to lock on the local node so that only `(1 - pooled_fraction)` of
/// the peak footprint (plus `headroom`) remains allocatable there:
/// `max(0, free_local - (1 - f) * peak - headroom)`.
pub fn compute_lock_bytes(free_local: u64, peak_usage: u64, pooled_fraction: f64, headroom: u64) -> u64 {
    let f = pooled_fraction.clamp(0.0, 1.0);
    if peak_usage == 0 {
        warn!("peak usage is 0; the whole local node minus headroom will be locked");
    }
    let local_share = ((1.0 - f) * peak_usage as f64).round() as u64;
    free_local.saturating_sub(local_share).saturating_sub(headroom)
}

/// Resource-limit state for page locking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockLimit {
    /// Soft `RLIMIT_MEMLOCK`, `None` when unlimited.
    pub soft_bytes: Option<u64>,
    /// The process holds `CAP_IPC_LOCK`, which bypasses the limit.
    pub privileged: bool,
}

impl LockLimit {
    pub fn probe() -> LockLimit {
        // SAFETY: getrlimit writes into the provided struct.
        let mut rl = libc::rlimit {
            rlim_cur: 0,
            rlim_max: 0,
        };
        let soft = if unsafe { libc::getrlimit(libc::RLIMIT_MEMLOCK, &mut rl) } == 0 {
            (rl.rlim_cur != libc::RLIM_INFINITY).then_some(rl.rlim_cur)
        } else {
            Some(0)
        };
        LockLimit {
            soft_bytes: soft,
            privileged: has_cap_ipc_lock(),
        }
    }

    pub fn allows(&self, bytes: u64) -> bool {
        self.privileged || self.soft_bytes.map_or(true, |lim| bytes <= lim)
    }
}

fn has_cap_ipc_lock() -> bool {
    const CAP_IPC_LOCK: u32 = 14;
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find_map(|l| l.strip_prefix("CapEff:"))
                .and_then(|v| u64::from_str_radix(v.trim(), 16).ok())
        })
        .is_some_and(|caps| caps & (1 << CAP_IPC_LOCK) != 0)
}

/// A composition whose policy is ready to be inherited by launched workloads
/// and whose lock reservations are held.
#[derive(Debug)]
pub struct ActiveComposition {
    pub composition: Composition,
    launch: LaunchPolicy,
    locks: Vec<LockReservation>,
    released: bool,
}

impl ActiveComposition {
    /// Policy to apply in a child between `fork` and `exec`.
    pub fn launch_policy(&self) -> LaunchPolicy {
        self.launch
    }

    pub fn locks(&self) -> &[LockReservation] {
        &self.locks
    }

    pub fn locked_bytes(&self) -> u64 {
        self.locks.iter().filter(|l| l.is_held()).map(|l| l.bytes).sum()
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    /// Applies the policy to the calling thread (and threads it spawns later)
    /// until the guard drops.
    pub fn enter_current_thread(&self) -> Result<ThreadArming, EmulatorError> {
        let saved = ThreadState::capture().map_err(EmulatorError::os("get_mempolicy"))?;
        if let Err(errno) = self.launch.apply_to_current_thread() {
            let _ = saved.restore();
            return Err(EmulatorError::PartialArming(format!(
                "arming current thread: {}",
                io::Error::from_raw_os_error(errno)
            )));
        }
        Ok(ThreadArming { saved })
    }

    /// Releases every lock reservation. Idempotent.
    pub fn release(&mut self) {
        if self.released {
            return;
        }
        for l in &mut self.locks {
            l.release();
        }
        self.released = true;
    }
}

impl Drop for ActiveComposition {
    fn drop(&mut self) {
        self.release();
    }
}

/// Restores the calling thread's affinity and memory policy on drop.
pub struct ThreadArming {
    saved: ThreadState,
}

impl Drop for ThreadArming {
    fn drop(&mut self) {
        if let Err(e) = self.saved.restore() {
            warn!("restoring thread memory policy: {e}");
        }
    }
}

/// Arms `c` on the live host.
pub fn apply_composition(c: &Composition, topo: &Topology) -> Result<ActiveComposition, EmulatorError> {
    c.check_satisfiable(topo)?;
    let cpus = &topo.node(c.cpu_binding).expect("checked above").cpus;
    let launch = LaunchPolicy::new(cpus, &c.memory_policy()).map_err(EmulatorError::os("policy"))?;

    // Probe the policy in a scratch thread so failures surface before launch.
    let probe = std::thread::spawn(move || launch.apply_to_current_thread());
    match probe.join() {
        Ok(Ok(())) => {}
        Ok(Err(errno)) => {
            return Err(EmulatorError::Unsatisfiable(format!(
                "kernel rejected policy {:?}: {}",
                c.memory_policy(),
                io::Error::from_raw_os_error(errno)
            )))
        }
        Err(_) => return Err(EmulatorError::PartialArming("policy probe thread panicked".into())),
    }

    let mut active = ActiveComposition {
        composition: c.clone(),
        launch,
        locks: Vec::new(),
        released: false,
    };

    if c.uses_capacity_split() {
        let free = node_free_bytes(c.local_node)
            .ok_or_else(|| EmulatorError::Unsatisfiable(format!("no meminfo for node {}", c.local_node)))?;
        let bytes = compute_lock_bytes(
            free,
            c.peak_usage_bytes.unwrap_or(0),
            c.pooled_fraction.unwrap_or(0.0),
            c.headroom(),
        );
        if bytes > 0 {
            let limit = LockLimit::probe();
            if !limit.allows(bytes) {
                return Err(EmulatorError::Unsatisfiable(format!(
                    "locking {bytes} bytes exceeds RLIMIT_MEMLOCK ({:?}); raise it with `ulimit -l unlimited` \
                     or grant CAP_IPC_LOCK",
                    limit.soft_bytes
                )));
            }
            info!("locking {bytes} bytes on node {} (free {free})", c.local_node);
            match LockReservation::acquire(c.local_node, bytes) {
                Ok(r) => active.locks.push(r),
                Err(e) => {
                    active.release();
                    return Err(match e {
                        EmulatorError::Unsatisfiable(m) => EmulatorError::Unsatisfiable(m),
                        other => EmulatorError::PartialArming(other.to_string()),
                    });
                }
            }
        }
    }
    Ok(active)
}

/// Releases an active composition. Safe to call more than once.
pub fn release_composition(active: &mut ActiveComposition) {
    active.release();
}

/// One composition per emulated host, each on its own local node, all sharing
/// `pool_node` through interleaved allocation. Local nodes are the lowest
/// memory nodes other than the pool.
pub fn plan_sharing(topo: &Topology, hosts: usize, pool_node: NodeId) -> Result<Vec<Composition>, EmulatorError> {
    let locals: Vec<NodeId> = topo
        .memory_nodes()
        .into_iter()
        .filter(|&n| n != pool_node && topo.node(n).is_some_and(|i| !i.cpus.is_empty()))
        .take(hosts)
        .collect();
    plan_sharing_on(topo, &locals, hosts, pool_node)
}

/// Like [`plan_sharing`] with explicit local nodes.
pub fn plan_sharing_on(
    topo: &Topology,
    local_nodes: &[NodeId],
    hosts: usize,
    pool_node: NodeId,
) -> Result<Vec<Composition>, EmulatorError> {
    if hosts == 0 {
        return Err(EmulatorError::Invalid("at least one host is required".into()));
    }
    let available = topo.memory_nodes().len();
    if hosts + 1 > available {
        return Err(EmulatorError::Unsatisfiable(format!(
            "{hosts} hosts plus a pool need {} NUMA nodes; host has {available}",
            hosts + 1
        )));
    }
    if local_nodes.len() < hosts {
        return Err(EmulatorError::Unsatisfiable(format!(
            "only {} candidate local nodes for {hosts} hosts",
            local_nodes.len()
        )));
    }
    local_nodes[..hosts]
        .iter()
        .map(|&local| {
            let c = Composition::shared_pool(local, pool_node);
            c.check_satisfiable(topo)?;
            Ok(c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: u64 = 1 << 30;

    #[test]
    fn lock_bytes_examples() {
        assert_eq!(compute_lock_bytes(60 * GIB, 8 * GIB, 0.75, 0), 58 * GIB);
        assert_eq!(compute_lock_bytes(60 * GIB, 8 * GIB, 0.0, 0), 52 * GIB);
        assert_eq!(compute_lock_bytes(8 * GIB, 8 * GIB, 0.0, 64 << 20), 0);
        assert_eq!(compute_lock_bytes(10 * GIB, 0, 0.5, GIB), 9 * GIB);
        assert_eq!(compute_lock_bytes(10 * GIB, 4 * GIB, 1.0, 0), 10 * GIB);
    }

    #[test]
    fn fraction_maps_to_kind() {
        assert_eq!(Composition::for_fraction(0, 1, 0.0, GIB).kind, CompositionKind::LocalOnly);
        assert_eq!(Composition::for_fraction(0, 1, 0.5, GIB).kind, CompositionKind::CapacitySplit);
        assert_eq!(Composition::for_fraction(0, 1, 1.0, GIB).kind, CompositionKind::RemoteOnly);
    }

    #[test]
    fn structural_invariants() {
        assert!(Composition::capacity_split(0, 1, 0.0, GIB).validate().is_err());
        assert!(Composition::capacity_split(0, 1, 1.0, GIB).validate().is_err());
        assert!(Composition::capacity_split(0, 1, 0.5, 0).validate().is_err());
        assert!(Composition::capacity_split(0, 1, 0.5, GIB).validate().is_ok());
        assert!(Composition::remote_only(0, 0).validate().is_err());
        let mut c = Composition::local_only(0);
        c.cpu_binding = 1;
        assert!(c.validate().is_err());
        let mut c = Composition::interleave(0, vec![1, 2], true);
        assert!(c.validate().is_ok());
        c.link_count = Some(3);
        assert!(c.validate().is_err());
        assert!(Composition::interleave(0, vec![], true).validate().is_err());
        assert!(Composition::interleave(0, vec![1, 1], true).validate().is_err());
    }

    #[test]
    fn policies_per_kind() {
        assert_eq!(Composition::local_only(0).memory_policy(), MemPolicy::Bind(vec![0]));
        assert_eq!(Composition::remote_only(0, 1).memory_policy(), MemPolicy::Bind(vec![1]));
        assert_eq!(
            Composition::capacity_split(0, 2, 0.5, GIB).memory_policy(),
            MemPolicy::Bind(vec![0, 2])
        );
        assert_eq!(
            Composition::interleave(0, vec![1, 2, 3], true).memory_policy(),
            MemPolicy::Interleave(vec![0, 1, 2, 3])
        );
        assert_eq!(
            Composition::interleave(0, vec![1, 2], false).memory_policy(),
            MemPolicy::Interleave(vec![1, 2])
        );
        assert_eq!(Composition::shared_pool(2, 3).memory_policy(), MemPolicy::Interleave(vec![2, 3]));
    }

    #[test]
    fn single_node_host_rejects_pool_kinds() {
        let topo = Topology::synthetic(1, 4, 16 * GIB);
        assert!(Composition::local_only(0).check_satisfiable(&topo).is_ok());
        for c in [
            Composition::remote_only(0, 1),
            Composition::capacity_split(0, 1, 0.5, GIB),
            Composition::interleave(0, vec![1], true),
        ] {
            assert!(matches!(c.check_satisfiable(&topo), Err(EmulatorError::Unsatisfiable(_))));
        }
    }

    #[test]
    fn missing_nodes_are_unsatisfiable() {
        let topo = Topology::synthetic(2, 4, 16 * GIB);
        assert!(Composition::remote_only(0, 5).check_satisfiable(&topo).is_err());
        assert!(Composition::local_only(7).check_satisfiable(&topo).is_err());
        assert!(Composition::remote_only(0, 1).check_satisfiable(&topo).is_ok());
    }

    #[test]
    fn sharing_plans() {
        let topo = Topology::synthetic(4, 8, 64 * GIB);
        let plan = plan_sharing(&topo, 3, 3).unwrap();
        assert_eq!(plan.iter().map(|c| c.local_node).collect::<Vec<_>>(), vec![0, 1, 2]);
        for c in &plan {
            assert_eq!(c.pool_nodes, vec![3]);
            assert_eq!(c.cpu_binding, c.local_node);
            assert_eq!(c.memory_policy(), MemPolicy::Interleave(vec![c.local_node, 3]));
        }
        let one = plan_sharing(&topo, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].local_node, 0);
        assert!(matches!(plan_sharing(&topo, 4, 3), Err(EmulatorError::Unsatisfiable(_))));
        assert!(plan_sharing(&topo, 0, 3).is_err());
    }

    #[test]
    fn composition_file_formats() {
        let c = Composition::capacity_split(0, 1, 0.25, 2 * GIB);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<Composition>(&json).unwrap(), c);
        let toml_text = "kind = \"bandwidth_interleave\"\nlocal_node = 0\npool_nodes = [1, 2]\nlink_count = 2\n";
        let c: Composition = toml::from_str(toml_text).unwrap();
        assert!(c.include_local);
        assert_eq!(c.memory_policy(), MemPolicy::Interleave(vec![0, 1, 2]));
    }

    #[test]
    fn local_only_applies_and_releases_on_this_host() {
        let topo = Topology::discover();
        let node = topo.memory_nodes()[0];
        let c = Composition::local_only(node);
        let mut a = apply_composition(&c, &topo).unwrap();
        assert_eq!(a.locked_bytes(), 0);
        {
            let _guard = a.enter_current_thread().unwrap();
            assert_eq!(policy::current_policy().unwrap(), MemPolicy::Bind(vec![node]));
        }
        release_composition(&mut a);
        assert!(a.is_released());
        release_composition(&mut a);
        let again = apply_composition(&c, &topo);
        assert!(again.is_ok());
    }

    #[test]
    fn lock_limit_logic() {
        let l = LockLimit {
            soft_bytes: Some(1 << 20),
            privileged: false,
        };
        assert!(l.allows(1 << 20));
        assert!(!l.allows(2 << 20));
        assert!(LockLimit { privileged: true, ..l }.allows(u64::MAX));
        assert!(LockLimit {
            soft_bytes: None,
            privileged: false
        }
        .allows(u64::MAX));
    }
}
