//! Memory-usage profiling for Linux workloads and emulation of composable
//! (pooled) memory on NUMA hardware.
//!
//! The pieces:
//!
//! - [`procfs`] reads per-process residency, referenced bits and node placement.
//! - [`supervisor`] launches workloads and samples them by timer, self-stop or
//!   output match.
//! - [`emulator`] makes a NUMA node behave as a memory pool by policy and
//!   locked local memory.
//! - [`metrics`] turns profiles into capacity, cold-page and bandwidth
//!   estimates and classifies sensitivity to pooled memory.
//! - [`probes`] measures bandwidth and latency of an emulated composition.
//! - [`cli`] ties the above together behind the `memcompose` binary.

pub mod cli;
pub mod emulator;
pub mod metrics;
pub mod probes;
pub mod procfs;
pub mod selfstop;
pub mod supervisor;
pub mod topology;
pub mod workload;
