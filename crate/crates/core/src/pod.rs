//! Pod records and their lifecycle phases.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::cluster::ResourceUsage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PodKind {
    Bbu,
    Rrh,
    Epc,
}

impl fmt::Display for PodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PodKind::Bbu => "BBU",
            PodKind::Rrh => "RRH",
            PodKind::Epc => "EPC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Pending,
    Scheduled,
    Starting,
    /// RRH only: publishing its discovery record.
    Registering,
    /// BBU only: waiting for its peer RRH's record.
    Discovering,
    Running,
    Terminating,
    Gone,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pending => "PENDING",
            Phase::Scheduled => "SCHEDULED",
            Phase::Starting => "STARTING",
            Phase::Registering => "REGISTERING",
            Phase::Discovering => "DISCOVERING",
            Phase::Running => "RUNNING",
            Phase::Terminating => "TERMINATING",
            Phase::Gone => "GONE",
        }
    }

    /// Whether `self -> next` is a legal lifecycle edge for a pod of `kind`.
    /// The forward chain is PENDING, SCHEDULED, STARTING, REGISTERING (RRH)
    /// or DISCOVERING (BBU), RUNNING. Any phase before TERMINATING may jump
    /// to TERMINATING, which is followed only by GONE.
    pub fn can_transition(self, next: Phase, kind: PodKind) -> bool {
        use Phase::*;
        match (self, next) {
            (Pending, Scheduled) | (Scheduled, Starting) => true,
            (Starting, Registering) => kind == PodKind::Rrh,
            (Starting, Discovering) => kind == PodKind::Bbu,
            (Registering, Running) => kind == PodKind::Rrh,
            (Discovering, Running) => kind == PodKind::Bbu,
            (Terminating, Gone) => true,
            (from, Terminating) => from < Terminating,
            _ => false,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One simulated BBU, RRH or EPC unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PodInstance {
    pub name: String,
    pub kind: PodKind,
    pub set: Option<String>,
    pub ordinal: Option<u32>,
    pub node: Option<String>,
    pub ip: Option<Ipv4Addr>,
    pub phase: Phase,
    /// Paired RRH for a BBU, paired BBU for an RRH.
    pub peer: Option<String>,
    /// Reservation held on `node` while scheduled.
    pub requests: ResourceUsage,
    /// Peer address learned through discovery (BBU only).
    pub peer_ip: Option<Ipv4Addr>,
    /// Why the pod is still PENDING, if scheduling failed.
    pub pending_reason: Option<String>,
    /// Set once a BBU exhausts its discovery retry budget.
    pub diagnostic: Option<String>,
    pub discovery_attempts: u32,
    /// Simulated time (ms) before which the next discovery attempt must not run.
    pub next_attempt_ms: u64,
}

impl PodInstance {
    pub fn new(set: &str, kind: PodKind, ordinal: u32, requests: ResourceUsage) -> Self {
        Self {
            name: pod_name(set, ordinal),
            kind,
            set: Some(set.to_owned()),
            ordinal: Some(ordinal),
            node: None,
            ip: None,
            phase: Phase::Pending,
            peer: None,
            requests,
            peer_ip: None,
            pending_reason: None,
            diagnostic: None,
            discovery_attempts: 0,
            next_attempt_ms: 0,
        }
    }

    /// Counts as a live member of its set (holds its ordinal).
    pub fn is_live(&self) -> bool {
        self.phase != Phase::Gone
    }
}

pub fn pod_name(set: &str, ordinal: u32) -> String {
    format!("{set}-{ordinal}")
}
