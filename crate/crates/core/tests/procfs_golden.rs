mod common;

use memcompose::procfs::{parse_numa_maps, parse_smaps_rollup, ProcfsError};
use proptest::prelude::*;

#[test]
fn golden_fixtures() {
    let out = common::run_golden_suite();
    assert!(out.failures.is_empty(), "{:#?}", out.failures);
    assert!(out.valid_checked >= 10, "only {} valid fixtures", out.valid_checked);
    assert!(out.malformed_checked >= 10);
}

#[test]
fn rollup_missing_fields_are_reported() {
    let text = std::fs::read_to_string(common::fixtures_dir().join("missing-referenced.smaps_rollup")).unwrap();
    let r = parse_smaps_rollup(&text).unwrap();
    assert!(r.missing.referenced);
    assert!(!r.missing.pss && !r.missing.swap);
}

fn rollup_line() -> impl Strategy<Value = String> {
    prop_oneof![
        (any::<u32>()).prop_map(|n| format!("Rss: {n} kB")),
        (any::<u32>()).prop_map(|n| format!("Pss:\t{n} kB")),
        "[A-Za-z_]{1,12}: [0-9]{1,8} kB",
        ".{0,40}",
    ]
}

proptest! {
    #[test]
    fn parsers_never_panic(text in ".{0,400}") {
        let _ = parse_smaps_rollup(&text);
        let _ = parse_numa_maps(&text, 4);
    }

    #[test]
    fn rollup_errors_are_parse_errors(lines in proptest::collection::vec(rollup_line(), 0..12)) {
        match parse_smaps_rollup(&lines.join("\n")) {
            Ok(_) | Err(ProcfsError::ParseError { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected error kind {e}"),
        }
    }

    #[test]
    fn numa_totals_match_an_independent_sum(
        rows in proptest::collection::vec(proptest::collection::btree_map(0u32..4, 0u64..100_000, 0..4), 0..8)
    ) {
        let mut text = String::new();
        let mut want = std::collections::BTreeMap::new();
        for (i, row) in rows.iter().enumerate() {
            text.push_str(&format!("{:x} default anon=1", 0x7f00_0000_0000u64 + (i as u64) * 0x1000));
            for (n, c) in row {
                text.push_str(&format!(" N{n}={c}"));
                if *c > 0 || want.contains_key(n) {
                    *want.entry(*n).or_insert(0) += c;
                } else {
                    want.insert(*n, 0);
                }
            }
            text.push_str(" kernelpagesize_kB=4\n");
        }
        prop_assert_eq!(parse_numa_maps(&text, 4).unwrap(), want);
    }
}
