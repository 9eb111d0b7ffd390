//! Every acceptance criterion at its pinned tolerance, one line each.
//!
//! The report goes straight to stdout so it shows up even when the harness
//! captures test output.

use std::io::Write;

use rapo::acceptance::run_suite;
use rapo::ExperimentConfig;

#[test]
fn acceptance_criteria() {
    let work = tempfile::tempdir().unwrap();
    let reports = run_suite("all", &ExperimentConfig::default(), work.path()).unwrap();
    let ids: Vec<u8> = reports.iter().map(|r| r.id).collect();
    assert_eq!(ids, (1..=10).collect::<Vec<u8>>());
    let mut out = std::io::stdout().lock();
    for r in &reports {
        writeln!(out, "{}", r.line()).unwrap();
    }
    out.flush().unwrap();
    drop(out);
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.line()).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
