//! Region-boundary helper for workloads profiled in interrupt mode.
//!
//! A workload calls [`region_boundary`] at the end of its initialization and
//! again at the end of its computation. Each call stops the process until
//! the supervisor has sampled it and sent `SIGCONT`. Unsupervised, the call
//! would stop the process indefinitely, so [`region_boundary_if_supervised`]
//! checks for the supervisor's marker variable first.
//!
//! Non-Rust workloads get the same effect from `raise(SIGSTOP)` in C or
//! `kill -STOP $$` in a shell script.

/// Set in the environment of every process launched under supervision.
pub const SUPERVISED_ENV: &str = "MEMCOMPOSE_SUPERVISED";

/// Stops the calling process; returns once it has been resumed.
pub fn region_boundary() {
    // SAFETY: raise(2) has no memory-safety preconditions.
    unsafe {
        libc::raise(libc::SIGSTOP);
    }
}

/// [`region_boundary`], but only when running under the supervisor.
/// Returns whether a stop was raised.
pub fn region_boundary_if_supervised() -> bool {
    if std::env::var_os(SUPERVISED_ENV).is_some() {
        region_boundary();
        true
    } else {
        false
    }
}
