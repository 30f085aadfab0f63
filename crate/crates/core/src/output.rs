//! Run artifacts: `metrics.csv`, `events.log` and `summary.json`.
//!
//! CSV and log rendering use integer arithmetic only, so identical runs
//! produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::cluster::ResourceUsage;
use crate::pod::PodInstance;
use crate::ranmodel::{MetricsSample, Rate};
use crate::scenario::{load_scenario, secs_to_ms, LoadError, ScenarioConfig};
use crate::simkernel::{fmt_ms, run, EventKind, RunOutcome, SimError, SimEvent};

pub const CSV_HEADER: &str =
    "time_s,node,cpu_millicores,cpu_frac,mem_mib,mem_frac,fh_throughput_mbps,pairs_active";

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.log";
pub const SUMMARY_FILE: &str = "summary.json";

/// Environment variable selecting [`Verbosity`].
pub const LOG_ENV: &str = "CRAN_SIM_LOG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_HALT: i32 = 3;

/// `used / capacity` rounded half-up to three decimals.
fn fraction(used: u64, capacity: u64) -> String {
    if capacity == 0 {
        return "0.000".into();
    }
    let milli = (u128::from(used) * 2000 + u128::from(capacity)) / (2 * u128::from(capacity));
    format!("{}.{:03}", milli / 1000, milli % 1000)
}

fn push_row(
    out: &mut String,
    sample: &MetricsSample,
    node: &str,
    used: ResourceUsage,
    cap: ResourceUsage,
) {
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        fmt_ms(sample.time_ms),
        node,
        used.cpu,
        fraction(used.cpu, cap.cpu),
        used.mem,
        fraction(used.mem, cap.mem),
        sample.fh_throughput,
        sample.pairs_active
    );
}

/// One row per node per sample, followed by an `ALL` row with cluster totals.
/// Fronthaul and pair columns carry the cluster-wide values on every row.
pub fn emit_metrics(samples: &[MetricsSample]) -> String {
    let mut out = String::with_capacity(64 * (samples.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in samples {
        for n in &s.nodes {
            push_row(&mut out, s, &n.node, n.used, n.capacity);
        }
        let (used, cap) = s.totals();
        push_row(&mut out, s, "ALL", used, cap);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum Verbosity {
    /// Scale commands and autoscaler decisions.
    Quiet,
    /// Adds phase transitions and registry mutations.
    #[default]
    Info,
    /// Adds one metrics line per tick.
    Debug,
}

impl Verbosity {
    pub fn includes(self, kind: EventKind) -> bool {
        match kind {
            EventKind::ScaleCmd | EventKind::AutoscaleDecision => true,
            EventKind::PhaseTransition | EventKind::RegistryMutation => self >= Verbosity::Info,
            EventKind::MetricsSample => self >= Verbosity::Debug,
        }
    }

    /// Reads [`LOG_ENV`]; unset means `Info`.
    pub fn from_env() -> Result<Self, String> {
        match std::env::var(LOG_ENV) {
            Ok(v) => v.parse(),
            Err(std::env::VarError::NotPresent) => Ok(Self::default()),
            Err(e) => Err(format!("{LOG_ENV}: {e}")),
        }
    }
}

impl FromStr for Verbosity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "quiet" => Ok(Verbosity::Quiet),
            "info" | "" => Ok(Verbosity::Info),
            "debug" => Ok(Verbosity::Debug),
            other => Err(format!(
                "{LOG_ENV}: expected quiet, info or debug, got {other:?}"
            )),
        }
    }
}

pub fn emit_events(events: &[SimEvent], verbosity: Verbosity) -> String {
    let mut out = String::new();
    for e in events.iter().filter(|e| verbosity.includes(e.kind())) {
        let _ = writeln!(out, "{e}");
    }
    out
}

#[derive(Debug, Serialize)]
pub struct HaltSummary {
    pub invariant: String,
    pub time_s: f64,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct NodePeak {
    pub node: String,
    pub cpu_millicores: u64,
    /// Peak CPU in cores (1000 millicores per core).
    pub cpu_cores: f64,
    pub mem_mib: u64,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub duration_s: f64,
    pub steps: u64,
    pub completed: bool,
    pub halt: Option<HaltSummary>,
    pub final_fh_throughput_mbps: Rate,
    pub peak_fh_throughput_mbps: Rate,
    pub final_pairs_active: u32,
    pub events: usize,
    pub node_peaks: Vec<NodePeak>,
    pub pods: Vec<PodInstance>,
}

impl Summary {
    pub fn new(cfg: &ScenarioConfig, duration_ms: u64, outcome: &RunOutcome) -> Self {
        let last = outcome.samples.last();
        let mut node_peaks: Vec<NodePeak> = Vec::new();
        for s in &outcome.samples {
            for n in &s.nodes {
                match node_peaks.iter_mut().find(|p| p.node == n.node) {
                    Some(p) => {
                        p.cpu_millicores = p.cpu_millicores.max(n.used.cpu);
                        p.mem_mib = p.mem_mib.max(n.used.mem);
                    }
                    None => node_peaks.push(NodePeak {
                        node: n.node.clone(),
                        cpu_millicores: n.used.cpu,
                        cpu_cores: 0.0,
                        mem_mib: n.used.mem,
                    }),
                }
            }
        }
        for p in &mut node_peaks {
            p.cpu_cores = p.cpu_millicores as f64 / 1000.0;
        }
        let halt = outcome.halt.as_ref().map(|e| match e {
            SimError::Invariant {
                invariant,
                time_ms,
                detail,
            } => HaltSummary {
                invariant: (*invariant).to_owned(),
                time_s: *time_ms as f64 / 1000.0,
                detail: detail.clone(),
            },
            SimError::Scenario(_) => HaltSummary {
                invariant: "scenario".into(),
                time_s: 0.0,
                detail: e.to_string(),
            },
        });
        Self {
            seed: cfg.seed,
            duration_s: duration_ms as f64 / 1000.0,
            steps: outcome.steps,
            completed: outcome.halt.is_none(),
            halt,
            final_fh_throughput_mbps: last.map_or(Rate::ZERO, |s| s.fh_throughput),
            peak_fh_throughput_mbps: outcome
                .samples
                .iter()
                .map(|s| s.fh_throughput)
                .max()
                .unwrap_or(Rate::ZERO),
            final_pairs_active: last.map_or(0, |s| s.pairs_active),
            events: outcome.events.len(),
            node_peaks,
            pods: outcome.pods.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub strict: bool,
    pub verbosity: Verbosity,
}

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("--duration {0}: must be a positive whole number of milliseconds")]
    BadDuration(f64),
    #[error("{}", .0)]
    Sim(SimError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        EXIT_ERROR
    }
}

/// Result of a run that produced its artifacts.
#[derive(Debug)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub summary: Summary,
    pub metrics_csv: String,
    pub events_log: String,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.outcome.halt.is_some() {
            EXIT_HALT
        } else {
            EXIT_OK
        }
    }
}

/// Runs `cfg` and renders every artifact in memory.
pub fn render(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, CommandError> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let duration_ms = match opts.duration_s {
        Some(d) => match secs_to_ms(d) {
            Some(ms) if ms > 0 => ms,
            _ => return Err(CommandError::BadDuration(d)),
        },
        None => cfg.duration_ms(),
    };
    let outcome = run(&cfg, Some(duration_ms)).map_err(CommandError::Sim)?;
    Ok(RunReport {
        summary: Summary::new(&cfg, duration_ms, &outcome),
        metrics_csv: emit_metrics(&outcome.samples),
        events_log: emit_events(&outcome.events, opts.verbosity),
        outcome,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CommandError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CommandError::Io { path, source })
}

/// Loads a scenario, runs it and writes the three artifacts into `out_dir`
/// (created if missing). Artifacts are written even when the run halts on
/// an invariant; [`RunReport::exit_code`] tells the two apart.
pub fn run_command(
    scenario_path: &Path,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunReport, CommandError> {
    let cfg = load_scenario(scenario_path, opts.strict)?;
    let report = render(&cfg, opts)?;
    fs::create_dir_all(out_dir).map_err(|source| CommandError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    write_file(out_dir, METRICS_FILE, &report.metrics_csv)?;
    write_file(out_dir, EVENTS_FILE, &report.events_log)?;
    write_file(out_dir, SUMMARY_FILE, &report.summary.to_json())?;
    Ok(report)
}
