mod common;

use common::synth;
use memcompose::emulator::{apply_composition, compute_lock_bytes, Composition, EmulatorError};
use memcompose::supervisor::{run_profiled, SamplingPlan};
use memcompose::topology::Topology;
use proptest::prelude::*;

fn peak_node_pages(p: &memcompose::supervisor::Profile) -> std::collections::BTreeMap<u32, u64> {
    p.snapshots.iter().max_by_key(|s| s.rss_kib).unwrap().node_pages.clone()
}

#[test]
fn local_only_places_everything_locally() {
    let topo = Topology::discover();
    let local = topo.memory_nodes()[0];
    let c = Composition::local_only(local);
    let cmd = synth(&["grow", "--step", "64M", "--steps", "1", "--interval", "0.5"]);
    let p = run_profiled(&cmd, &SamplingPlan::timer(0.1), Some(&c)).unwrap();
    let pages = peak_node_pages(&p);
    let total: u64 = pages.values().sum();
    assert!(total * 4 >= 64 * 1024, "{pages:?}");
    assert_eq!(pages.get(&local).copied().unwrap_or(0), total, "{pages:?}");
    assert_eq!(p.composition, Some(c));
}

#[test]
fn pool_compositions_need_two_nodes() {
    let topo = Topology::discover();
    if topo.memory_nodes().len() >= 2 {
        return;
    }
    let local = topo.memory_nodes()[0];
    for c in [
        Composition::remote_only(local, local + 1),
        Composition::capacity_split(local, local + 1, 0.5, 1 << 30),
        Composition::interleave(local, vec![local + 1], true),
        Composition::shared_pool(local, local + 1),
    ] {
        let e = apply_composition(&c, &topo).unwrap_err();
        assert!(matches!(e, EmulatorError::Unsatisfiable(_)), "{e}");
    }
}

#[test]
fn release_is_idempotent_and_leaves_no_locks() {
    let topo = Topology::discover();
    let local = topo.memory_nodes()[0];
    let mut a = apply_composition(&Composition::local_only(local), &topo).unwrap();
    assert_eq!(a.locked_bytes(), 0);
    a.release();
    a.release();
    assert!(a.is_released());
}

#[test]
fn capacity_split_places_the_pooled_fraction() {
    let topo = Topology::discover();
    let nodes = topo.memory_nodes();
    if nodes.len() < 2 {
        return;
    }
    let peak = 512u64 << 20;
    let c = Composition::capacity_split(nodes[0], nodes[1], 0.5, peak);
    let cmd = synth(&["grow", "--step", "512M", "--steps", "1", "--interval", "0.5"]);
    let p = run_profiled(&cmd, &SamplingPlan::timer(0.1), Some(&c)).unwrap();
    let pages = peak_node_pages(&p);
    let total: u64 = pages.values().sum();
    let pool = pages.get(&nodes[1]).copied().unwrap_or(0) as f64 / total as f64;
    assert!((pool - 0.5).abs() < 0.1, "{pages:?}");
}

proptest! {
    #[test]
    fn lock_bytes_matches_formula(free in 0u64..1 << 40, peak in 0u64..1 << 40, f in 0.0f64..=1.0, head in 0u64..1 << 30) {
        let got = compute_lock_bytes(free, peak, f, head);
        let want = (free as f64 - (1.0 - f) * peak as f64 - head as f64).max(0.0);
        prop_assert!((got as f64 - want).abs() <= 1.0 + want * 1e-12, "{got} vs {want}");
    }
}
