//! Resource profiles for BBU and RRH units and fronthaul throughput
//! accounting.
//!
//! Fronthaul rates are held as integer kb/s so that aggregates are exact.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cluster::{NodeSpec, ResourceUsage};
use crate::pod::{Phase, PodInstance, PodKind};

/// Minimum extra RRH CPU (millicores) the emulated UE must add.
pub const MIN_OAISIM_DELTA: u64 = 600;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("profile.{0} must be positive")]
    NonPositive(&'static str),
    #[error(
        "profile.rrh_cpu_oaisim_delta must be at least {MIN_OAISIM_DELTA} millicores, got {0}"
    )]
    OaisimDeltaTooSmall(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UeMode {
    /// Emulated UE; its baseband processing runs on the RRH host.
    Oaisim,
    /// Physical UE over a radio front end.
    RealUe,
}

impl fmt::Display for UeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UeMode::Oaisim => "OAISIM",
            UeMode::RealUe => "REAL_UE",
        })
    }
}

/// Per-unit resource draw of running pods. CPU in millicores, memory in MiB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub bbu_cpu: u64,
    pub bbu_mem: u64,
    pub rrh_cpu_real: u64,
    pub rrh_cpu_oaisim_delta: u64,
    pub rrh_mem: u64,
}

impl Default for WorkloadProfile {
    fn default() -> Self {
        Self {
            bbu_cpu: 1000,
            bbu_mem: 1024,
            rrh_cpu_real: 500,
            rrh_cpu_oaisim_delta: 700,
            rrh_mem: 512,
        }
    }
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let fields = [
            ("bbu_cpu", self.bbu_cpu),
            ("bbu_mem", self.bbu_mem),
            ("rrh_cpu_real", self.rrh_cpu_real),
            ("rrh_cpu_oaisim_delta", self.rrh_cpu_oaisim_delta),
            ("rrh_mem", self.rrh_mem),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ProfileError::NonPositive(name));
        }
        if self.rrh_cpu_oaisim_delta < MIN_OAISIM_DELTA {
            return Err(ProfileError::OaisimDeltaTooSmall(self.rrh_cpu_oaisim_delta));
        }
        Ok(())
    }

    pub fn rrh_cpu(&self, mode: UeMode) -> u64 {
        match mode {
            UeMode::RealUe => self.rrh_cpu_real,
            UeMode::Oaisim => self.rrh_cpu_real + self.rrh_cpu_oaisim_delta,
        }
    }
}

/// A data rate stored as integer kb/s and exchanged as Mb/s with at most
/// three decimals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rate {
    kbps: u64,
}

impl Rate {
    pub const ZERO: Rate = Rate { kbps: 0 };

    pub fn from_kbps(kbps: u64) -> Self {
        Self { kbps }
    }

    pub fn from_mbps(mbps: u64) -> Self {
        Self { kbps: mbps * 1000 }
    }

    /// Parses a Mb/s value that must be representable exactly in kb/s.
    pub fn try_from_mbps_f64(mbps: f64) -> Option<Self> {
        if !mbps.is_finite() || mbps < 0.0 {
            return None;
        }
        let kbps = (mbps * 1000.0).round();
        if (kbps - mbps * 1000.0).abs() > 1e-6 || kbps > u64::MAX as f64 {
            return None;
        }
        Some(Self { kbps: kbps as u64 })
    }

    pub fn kbps(self) -> u64 {
        self.kbps
    }
}

impl std::ops::Add for Rate {
    type Output = Rate;

    fn add(self, rhs: Rate) -> Rate {
        Rate::from_kbps(self.kbps + rhs.kbps)
    }
}

impl std::iter::Sum for Rate {
    fn sum<I: Iterator<Item = Rate>>(iter: I) -> Rate {
        iter.fold(Rate::ZERO, |a, b| a + b)
    }
}

/// Fixed-point Mb/s with three decimals, e.g. `614.000`.
impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.kbps / 1000, self.kbps % 1000)
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.kbps.is_multiple_of(1000) {
            s.serialize_u64(self.kbps / 1000)
        } else {
            s.serialize_f64(self.kbps as f64 / 1000.0)
        }
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Rate::try_from_mbps_f64(v).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "rate {v} Mb/s must be non-negative with at most three decimals"
            ))
        })
    }
}

/// A BBU/RRH association carrying a constant rate while both ends run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FronthaulPair {
    pub bbu: String,
    pub rrh: String,
    pub rate: Rate,
    pub active: bool,
    /// Simulated time of the most recent activation, in milliseconds.
    pub activated_at_ms: Option<u64>,
}

impl FronthaulPair {
    pub fn new(bbu: &str, rrh: &str, rate: Rate) -> Self {
        Self {
            bbu: bbu.to_owned(),
            rrh: rrh.to_owned(),
            rate,
            active: false,
            activated_at_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeSample {
    pub node: String,
    pub used: ResourceUsage,
    pub capacity: ResourceUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSample {
    /// Simulated time in milliseconds.
    pub time_ms: u64,
    /// One entry per node, in node-name order.
    pub nodes: Vec<NodeSample>,
    pub fh_throughput: Rate,
    pub pairs_active: u32,
}

impl MetricsSample {
    pub fn totals(&self) -> (ResourceUsage, ResourceUsage) {
        let used = self.nodes.iter().map(|n| n.used).sum();
        let cap = self.nodes.iter().map(|n| n.capacity).sum();
        (used, cap)
    }
}

/// Resource draw of one pod. Only RUNNING pods consume anything.
pub fn usage(pod: &PodInstance, mode: UeMode, profile: &WorkloadProfile) -> ResourceUsage {
    if pod.phase != Phase::Running {
        return ResourceUsage::ZERO;
    }
    match pod.kind {
        PodKind::Bbu => ResourceUsage::new(profile.bbu_cpu, profile.bbu_mem),
        PodKind::Rrh => ResourceUsage::new(profile.rrh_cpu(mode), profile.rrh_mem),
        // the core network runs outside the orchestrated pool
        PodKind::Epc => ResourceUsage::ZERO,
    }
}

/// Sum of `usage` over the pods placed on `node`.
pub fn node_usage<'a>(
    node: &NodeSpec,
    pods: impl IntoIterator<Item = &'a PodInstance>,
    mode: UeMode,
    profile: &WorkloadProfile,
) -> ResourceUsage {
    pods.into_iter()
        .filter(|p| p.node.as_deref() == Some(node.name.as_str()))
        .map(|p| usage(p, mode, profile))
        .sum()
}

/// Applies a multiplicative factor drawn uniformly from [1 - 5%, 1 + 5%].
pub fn jitter(u: ResourceUsage, rng: &mut impl Rng) -> ResourceUsage {
    let mut scale = |v: u64| -> u64 {
        let f: f64 = rng.gen_range(0.95..=1.05);
        (v as f64 * f).round() as u64
    };
    ResourceUsage::new(scale(u.cpu), scale(u.mem))
}

pub fn aggregate_fh<'a>(pairs: impl IntoIterator<Item = &'a FronthaulPair>) -> Rate {
    pairs.into_iter().filter(|p| p.active).map(|p| p.rate).sum()
}

/// Recomputes the active flag of every pair touching `pod` after it changed
/// phase. `phase_of` reports the current phase of any pod (`None` once the
/// pod no longer exists). Returns the indices of pairs whose flag flipped.
pub fn on_phase_change(
    pod: &str,
    pairs: &mut [FronthaulPair],
    phase_of: impl Fn(&str) -> Option<Phase>,
    now_ms: u64,
) -> Vec<usize> {
    let running = |name: &str| phase_of(name) == Some(Phase::Running);
    let mut flipped = Vec::new();
    for (i, pair) in pairs.iter_mut().enumerate() {
        if pair.bbu != pod && pair.rrh != pod {
            continue;
        }
        let active = running(&pair.bbu) && running(&pair.rrh);
        if active != pair.active {
            pair.active = active;
            if active {
                pair.activated_at_ms = Some(now_ms);
            }
            flipped.push(i);
        }
    }
    flipped
}
