//! Scenario files: loading, validation, and the shipped templates.
//!
//! Scenarios are JSON. Validation reports every problem it finds, each with
//! the path of the offending field.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::AutoscalePolicy;
use crate::cluster::{default_pod_cidr, NodeRole, NodeSpec, ResourceUsage};
use crate::orchestrator::{DiscoveryPolicy, Placement, RoleSelector, StatefulSetSpec};
use crate::pod::PodKind;
use crate::ranmodel::{Rate, UeMode, WorkloadProfile};
use crate::registry::validate_key;

pub const TESTBED_TEMPLATE: &str = "paper-testbed";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub path: String,
    pub message: String,
}

impl ValidationError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: invalid scenario:\n{}", format_errors(.errors))]
    Invalid {
        path: PathBuf,
        errors: Vec<ValidationError>,
    },
}

fn format_errors(errors: &[ValidationError]) -> String {
    errors
        .iter()
        .map(|e| format!("  - {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Scale { set: String, replicas: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub time_s: f64,
    pub command: Command,
}

impl TimelineEntry {
    pub fn scale(time_s: f64, set: &str, replicas: u32) -> Self {
        Self {
            time_s,
            command: Command::Scale {
                set: set.to_owned(),
                replicas,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub retry_interval_s: f64,
    #[serde(default)]
    pub max_retries: Option<u32>,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            retry_interval_s: 1.0,
            max_retries: None,
        }
    }
}

impl DiscoveryConfig {
    pub fn policy(&self) -> DiscoveryPolicy {
        DiscoveryPolicy {
            retry_interval_ms: secs_to_ms(self.retry_interval_s).unwrap_or(1000),
            max_retries: self.max_retries,
        }
    }
}

fn default_tick() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub nodes: Vec<NodeSpec>,
    /// Reconciled in declaration order.
    pub sets: Vec<StatefulSetSpec>,
    pub ue_mode: UeMode,
    #[serde(default)]
    pub profile: WorkloadProfile,
    /// Per-pair fronthaul rate in Mb/s.
    pub fh_rate_mbps: Rate,
    #[serde(default)]
    pub policy: AutoscalePolicy,
    #[serde(default)]
    pub timeline: Vec<TimelineEntry>,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tick")]
    pub tick_s: f64,
    /// Static core-network address, registered once at start.
    #[serde(default)]
    pub epc_ip: Option<Ipv4Addr>,
    #[serde(default)]
    pub discovery: DiscoveryConfig,
    /// Seeded +-5% noise on metered usage.
    #[serde(default)]
    pub usage_jitter: bool,
    /// Shuffle the per-tick lifecycle order with the seeded RNG.
    #[serde(default)]
    pub interleave: bool,
}

/// Converts seconds to whole milliseconds, rejecting negatives, non-finite
/// values and sub-millisecond precision.
pub fn secs_to_ms(s: f64) -> Option<u64> {
    if !s.is_finite() || s < 0.0 {
        return None;
    }
    let ms = (s * 1000.0).round();
    if (ms - s * 1000.0).abs() > 1e-6 {
        return None;
    }
    Some(ms as u64)
}

impl ScenarioConfig {
    /// Three identical 4-core/8 GiB machines: the master hosts the BBUs and
    /// each worker hosts one RRH. One pair starts at t=6 s (running at
    /// t=10 s), a second at t=56 s (running at t=60 s).
    pub fn testbed() -> Self {
        let node = |name: &str, role, idx| NodeSpec {
            name: name.to_owned(),
            role,
            cpu_capacity: 4000,
            mem_capacity: 8192,
            pod_cidr: default_pod_cidr(idx),
        };
        Self {
            nodes: vec![
                node("master", NodeRole::Master, 0),
                node("worker-1", NodeRole::Worker, 1),
                node("worker-2", NodeRole::Worker, 2),
            ],
            sets: vec![
                StatefulSetSpec {
                    name: "rrh".into(),
                    kind: PodKind::Rrh,
                    replicas: 0,
                    requests: ResourceUsage::new(1200, 512),
                    placement: Placement {
                        node_role: RoleSelector::Worker,
                        anti_affinity: true,
                    },
                },
                StatefulSetSpec {
                    name: "bbu".into(),
                    kind: PodKind::Bbu,
                    replicas: 0,
                    requests: ResourceUsage::new(1000, 1024),
                    placement: Placement {
                        node_role: RoleSelector::Master,
                        anti_affinity: false,
                    },
                },
            ],
            ue_mode: UeMode::Oaisim,
            profile: WorkloadProfile::default(),
            fh_rate_mbps: Rate::from_mbps(614),
            policy: AutoscalePolicy::default(),
            timeline: vec![
                TimelineEntry::scale(6.0, "rrh", 1),
                TimelineEntry::scale(6.0, "bbu", 1),
                TimelineEntry::scale(56.0, "rrh", 2),
                TimelineEntry::scale(56.0, "bbu", 2),
            ],
            duration_s: 120.0,
            seed: 42,
            tick_s: 1.0,
            epc_ip: Some(Ipv4Addr::new(192, 168, 122, 10)),
            discovery: DiscoveryConfig::default(),
            usage_jitter: false,
            interleave: false,
        }
    }

    pub fn template(name: &str) -> Option<Self> {
        match name {
            TESTBED_TEMPLATE => Some(Self::testbed()),
            _ => None,
        }
    }

    pub fn set(&self, name: &str) -> Option<&StatefulSetSpec> {
        self.sets.iter().find(|s| s.name == name)
    }

    pub fn set_of_kind(&self, kind: PodKind) -> Option<&StatefulSetSpec> {
        self.sets.iter().find(|s| s.kind == kind)
    }

    pub fn tick_ms(&self) -> u64 {
        secs_to_ms(self.tick_s).unwrap_or(1000)
    }

    pub fn duration_ms(&self) -> u64 {
        secs_to_ms(self.duration_s).unwrap_or(0)
    }

    /// Checks every scenario invariant and returns all violations.
    pub fn validate(&self) -> Result<(), Vec<ValidationError>> {
        let mut errs = Vec::new();
        self.validate_nodes(&mut errs);
        self.validate_sets(&mut errs);
        self.validate_timing(&mut errs);
        if let Err(e) = self.profile.validate() {
            errs.push(ValidationError::new("profile", e.to_string()));
        }
        if let Err(e) = self.policy.validate() {
            errs.push(ValidationError::new("policy", e.to_string()));
        }
        if self.fh_rate_mbps == Rate::ZERO {
            errs.push(ValidationError::new("fh_rate_mbps", "must be positive"));
        }
        if let Some(ip) = self.epc_ip {
            for (i, n) in self.nodes.iter().enumerate() {
                if n.pod_cidr.contains(ip) {
                    errs.push(ValidationError::new(
                        "epc_ip",
                        format!("{ip} lies inside nodes[{i}].pod_cidr {}", n.pod_cidr),
                    ));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    fn validate_nodes(&self, errs: &mut Vec<ValidationError>) {
        let masters = self
            .nodes
            .iter()
            .filter(|n| n.role == NodeRole::Master)
            .count();
        if masters != 1 {
            errs.push(ValidationError::new(
                "nodes",
                format!("exactly one MASTER required (found {masters})"),
            ));
        }
        let mut names = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let path = format!("nodes[{i}]");
            if n.name.is_empty() || n.name.chars().any(char::is_whitespace) {
                errs.push(ValidationError::new(
                    format!("{path}.name"),
                    "must be non-empty without whitespace",
                ));
            }
            if !names.insert(&n.name) {
                errs.push(ValidationError::new(
                    format!("{path}.name"),
                    format!("duplicate node {:?}", n.name),
                ));
            }
            if n.cpu_capacity == 0 {
                errs.push(ValidationError::new(
                    format!("{path}.cpu_capacity"),
                    "must be positive",
                ));
            }
            if n.mem_capacity == 0 {
                errs.push(ValidationError::new(
                    format!("{path}.mem_capacity"),
                    "must be positive",
                ));
            }
            for (j, m) in self.nodes.iter().enumerate().skip(i + 1) {
                if n.pod_cidr.overlaps(&m.pod_cidr) {
                    errs.push(ValidationError::new(
                        format!("{path}.pod_cidr"),
                        format!("{} overlaps nodes[{j}].pod_cidr {}", n.pod_cidr, m.pod_cidr),
                    ));
                }
            }
        }
    }

    fn validate_sets(&self, errs: &mut Vec<ValidationError>) {
        let mut names = BTreeSet::new();
        for (i, s) in self.sets.iter().enumerate() {
            let path = format!("sets[{i}]");
            if validate_key(&s.name).is_err() || s.name.contains('/') {
                errs.push(ValidationError::new(
                    format!("{path}.name"),
                    "must be a non-empty registry path segment",
                ));
            }
            if !names.insert(&s.name) {
                errs.push(ValidationError::new(
                    format!("{path}.name"),
                    format!("duplicate set {:?}", s.name),
                ));
            }
            if s.kind == PodKind::Epc {
                errs.push(ValidationError::new(
                    format!("{path}.kind"),
                    "EPC is not orchestrated; use BBU or RRH",
                ));
            }
        }
        for kind in [PodKind::Bbu, PodKind::Rrh] {
            if self.sets.iter().filter(|s| s.kind == kind).count() > 1 {
                errs.push(ValidationError::new(
                    "sets",
                    format!("at most one {kind} set is supported"),
                ));
            }
        }
        if self.set_of_kind(PodKind::Bbu).is_some() && self.set_of_kind(PodKind::Rrh).is_none() {
            errs.push(ValidationError::new(
                "sets",
                "a BBU set needs an RRH set to pair with",
            ));
        }
    }

    fn validate_timing(&self, errs: &mut Vec<ValidationError>) {
        let duration = secs_to_ms(self.duration_s);
        match duration {
            Some(d) if d > 0 => {}
            _ => errs.push(ValidationError::new(
                "duration_s",
                "must be positive with millisecond resolution",
            )),
        }
        match secs_to_ms(self.tick_s) {
            Some(t) if t > 0 => {}
            _ => errs.push(ValidationError::new(
                "tick_s",
                "must be positive with millisecond resolution",
            )),
        }
        match secs_to_ms(self.discovery.retry_interval_s) {
            Some(t) if t > 0 => {}
            _ => errs.push(ValidationError::new(
                "discovery.retry_interval_s",
                "must be positive with millisecond resolution",
            )),
        }
        let mut prev = 0;
        for (i, entry) in self.timeline.iter().enumerate() {
            let path = format!("timeline[{i}]");
            match secs_to_ms(entry.time_s) {
                None => errs.push(ValidationError::new(
                    format!("{path}.time_s"),
                    "must be non-negative with millisecond resolution",
                )),
                Some(t) => {
                    if t < prev {
                        errs.push(ValidationError::new(
                            format!("{path}.time_s"),
                            "timeline times must be non-decreasing",
                        ));
                    }
                    if duration.is_some_and(|d| t > d) {
                        errs.push(ValidationError::new(
                            format!("{path}.time_s"),
                            "exceeds duration_s",
                        ));
                    }
                    prev = prev.max(t);
                }
            }
            let Command::Scale { set, .. } = &entry.command;
            if self.set(set).is_none() {
                errs.push(ValidationError::new(
                    format!("{path}.command.scale.set"),
                    format!("unknown set {set:?}"),
                ));
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Parses scenario JSON. In strict mode unknown fields are errors; otherwise
/// they are ignored. Structural validation follows parsing.
pub fn parse_scenario(text: &str, strict: bool) -> Result<ScenarioConfig, Vec<ValidationError>> {
    let mut unknown = Vec::new();
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ScenarioConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
        .map_err(|e| vec![ValidationError::new("<document>", e.to_string())])?;
    let mut errs: Vec<ValidationError> = if strict {
        unknown
            .into_iter()
            .map(|p| ValidationError::new(p, "unknown field"))
            .collect()
    } else {
        Vec::new()
    };
    if let Err(mut v) = cfg.validate() {
        errs.append(&mut v);
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs)
    }
}

pub fn load_scenario(path: &Path, strict: bool) -> Result<ScenarioConfig, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_scenario(&text, strict).map_err(|errors| {
        if errors.len() == 1 && errors[0].path == "<document>" {
            LoadError::Parse {
                path: path.to_owned(),
                message: errors[0].message.clone(),
            }
        } else {
            LoadError::Invalid {
                path: path.to_owned(),
                errors,
            }
        }
    })
}
