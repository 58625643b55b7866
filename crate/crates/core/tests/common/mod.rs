//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use memcompose::procfs::{parse_numa_maps, parse_smaps_rollup, NodeId, ProcfsError};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_memcompose")
}

/// `memcompose synth <args>` as an argument vector.
pub fn synth(args: &[&str]) -> Vec<String> {
    std::iter::once(bin().to_string())
        .chain(std::iter::once("synth".to_string()))
        .chain(args.iter().map(|s| s.to_string()))
        .collect()
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/procfs")
}

#[derive(Debug, serde::Deserialize)]
pub struct Expected {
    pub smaps_rollup: BTreeMap<String, ExpectedRollup>,
    pub numa_maps: BTreeMap<String, BTreeMap<NodeId, u64>>,
}

#[derive(Debug, serde::Deserialize, PartialEq)]
pub struct ExpectedRollup {
    pub rss_kib: u64,
    pub pss_kib: u64,
    pub referenced_kib: u64,
    pub swap_kib: u64,
}

/// Outcome of running the parser golden suite.
pub struct GoldenOutcome {
    pub valid_checked: usize,
    pub malformed_checked: usize,
    pub failures: Vec<String>,
    pub elapsed: Duration,
}

/// Checks every fixture: exact values for valid ones, `ParseError` (and no
/// panic) for `*.malformed`.
pub fn run_golden_suite() -> GoldenOutcome {
    let start = Instant::now();
    let dir = fixtures_dir();
    let expected: Expected =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    let mut failures = Vec::new();
    let mut valid = 0;
    for (name, want) in &expected.smaps_rollup {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        match parse_smaps_rollup(&text) {
            Ok(got) => {
                let got = ExpectedRollup {
                    rss_kib: got.rss_kib,
                    pss_kib: got.pss_kib,
                    referenced_kib: got.referenced_kib,
                    swap_kib: got.swap_kib,
                };
                if &got != want {
                    failures.push(format!("{name}: got {got:?}, want {want:?}"));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
        valid += 1;
    }
    for (name, want) in &expected.numa_maps {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        match parse_numa_maps(&text, 4) {
            Ok(got) if &got == want => {}
            Ok(got) => failures.push(format!("{name}: got {got:?}, want {want:?}")),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
        valid += 1;
    }
    let mut malformed = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if !name.ends_with(".malformed") {
            continue;
        }
        let text = String::from_utf8_lossy(&std::fs::read(&path).unwrap()).to_string();
        let result = std::panic::catch_unwind(|| {
            if name.contains(".smaps_rollup") {
                parse_smaps_rollup(&text).map(|_| ())
            } else {
                parse_numa_maps(&text, 4).map(|_| ())
            }
        });
        match result {
            Ok(Err(ProcfsError::ParseError { .. })) => {}
            Ok(Err(e)) => failures.push(format!("{name}: wrong error {e}")),
            Ok(Ok(())) => failures.push(format!("{name}: accepted malformed input")),
            Err(_) => failures.push(format!("{name}: parser panicked")),
        }
        malformed += 1;
    }
    GoldenOutcome {
        valid_checked: valid,
        malformed_checked: malformed,
        failures,
        elapsed: start.elapsed(),
    }
}

/// Number of memory NUMA nodes on this host.
pub fn memory_nodes() -> Vec<NodeId> {
    memcompose::topology::Topology::discover().memory_nodes()
}
