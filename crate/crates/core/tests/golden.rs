//! Byte-exact comparison of the testbed artifacts against checked-in files.
//! Set `UPDATE_GOLDEN=1` to rewrite them after an intentional format change.

use std::path::PathBuf;

use cransim::output::{render, RunOptions, Verbosity, CSV_HEADER};
use cransim::scenario::ScenarioConfig;

fn golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected =
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    if expected != actual {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b);
        panic!("{name} differs from golden file (first differing line: {line:?})");
    }
}

fn testbed(verbosity: Verbosity) -> cransim::output::RunReport {
    let opts = RunOptions {
        verbosity,
        ..RunOptions::default()
    };
    render(&ScenarioConfig::testbed(), &opts).unwrap()
}

#[test]
fn testbed_metrics_csv() {
    let report = testbed(Verbosity::Info);
    let csv = &report.metrics_csv;
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert!(!csv.contains('\r'));
    assert!(csv.ends_with('\n'));
    // header plus (3 nodes + ALL) rows for each of 120 samples
    assert_eq!(csv.lines().count(), 1 + 4 * 120);
    golden("testbed_metrics.csv", csv);
}

#[test]
fn testbed_events_log() {
    golden("testbed_events.log", &testbed(Verbosity::Info).events_log);
}

#[test]
fn quiet_log_keeps_only_commands() {
    let log = testbed(Verbosity::Quiet).events_log;
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().all(|l| l.contains(" SCALE_CMD ")));
}

#[test]
fn debug_log_adds_one_metrics_line_per_tick() {
    let log = testbed(Verbosity::Debug).events_log;
    assert_eq!(
        log.lines()
            .filter(|l| l.contains(" METRICS_SAMPLE "))
            .count(),
        120
    );
}
