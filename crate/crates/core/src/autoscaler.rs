//! Watermark autoscaler that grows and shrinks the BBU and RRH sets
//! together, one pair at a time.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranmodel::MetricsSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScaleMetric {
    Cpu,
    Memory,
}

impl fmt::Display for ScaleMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMetric::Cpu => "CPU",
            ScaleMetric::Memory => "MEMORY",
        })
    }
}

/// How per-node fractions collapse into the single value compared against
/// the watermarks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeAggregation {
    /// Hottest node decides.
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("high_watermark must lie in (0, 1], got {0}")]
    HighOutOfRange(String),
    #[error("low_watermark must lie in [0, high_watermark), got {0}")]
    LowOutOfRange(String),
    #[error("min_replicas ({min}) exceeds max_replicas ({max})")]
    MinAboveMax { min: u32, max: u32 },
    #[error("cooldown_s must be a finite non-negative number, got {0}")]
    BadCooldown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoscalePolicy {
    pub metric: ScaleMetric,
    pub high_watermark: f64,
    pub low_watermark: f64,
    pub min_replicas: u32,
    pub max_replicas: u32,
    pub cooldown_s: f64,
    pub enabled: bool,
    #[serde(default)]
    pub aggregation: NodeAggregation,
}

impl Default for AutoscalePolicy {
    fn default() -> Self {
        Self {
            metric: ScaleMetric::Cpu,
            high_watermark: 0.80,
            low_watermark: 0.30,
            min_replicas: 1,
            max_replicas: 2,
            cooldown_s: 30.0,
            enabled: false,
            aggregation: NodeAggregation::Max,
        }
    }
}

impl AutoscalePolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.high_watermark > 0.0 && self.high_watermark <= 1.0) {
            return Err(PolicyError::HighOutOfRange(self.high_watermark.to_string()));
        }
        if !(self.low_watermark >= 0.0 && self.low_watermark < self.high_watermark) {
            return Err(PolicyError::LowOutOfRange(self.low_watermark.to_string()));
        }
        if self.min_replicas > self.max_replicas {
            return Err(PolicyError::MinAboveMax {
                min: self.min_replicas,
                max: self.max_replicas,
            });
        }
        if !(self.cooldown_s.is_finite() && self.cooldown_s >= 0.0) {
            return Err(PolicyError::BadCooldown(self.cooldown_s.to_string()));
        }
        Ok(())
    }

    pub fn cooldown_ms(&self) -> u64 {
        (self.cooldown_s * 1000.0).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    ScaleUp,
    ScaleDown,
    Hold,
}

impl Decision {
    pub fn delta(self) -> i64 {
        match self {
            Decision::ScaleUp => 1,
            Decision::ScaleDown => -1,
            Decision::Hold => 0,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::ScaleUp => "SCALE_UP",
            Decision::ScaleDown => "SCALE_DOWN",
            Decision::Hold => "HOLD",
        })
    }
}

/// Metric fraction of `sample` under `policy`: per node used/capacity,
/// folded by the policy's aggregation. Zero for a sample without nodes.
pub fn load_fraction(policy: &AutoscalePolicy, sample: &MetricsSample) -> f64 {
    let fractions = sample.nodes.iter().map(|n| {
        let (used, cap) = match policy.metric {
            ScaleMetric::Cpu => (n.used.cpu, n.capacity.cpu),
            ScaleMetric::Memory => (n.used.mem, n.capacity.mem),
        };
        used as f64 / cap as f64
    });
    match policy.aggregation {
        NodeAggregation::Max => fractions.fold(0.0, f64::max),
        NodeAggregation::Mean => {
            let n = sample.nodes.len();
            if n == 0 {
                0.0
            } else {
                fractions.sum::<f64>() / n as f64
            }
        }
    }
}

/// Watermark decision on the latest sample. `last_action_ms` is the time of
/// the previous non-HOLD decision, `None` if there was none.
pub fn evaluate(
    policy: &AutoscalePolicy,
    samples: &[MetricsSample],
    current_replicas: u32,
    last_action_ms: Option<u64>,
    now_ms: u64,
) -> Decision {
    let Some(latest) = samples.last() else {
        return Decision::Hold;
    };
    if !policy.enabled {
        return Decision::Hold;
    }
    let cooled = last_action_ms.is_none_or(|t| now_ms.saturating_sub(t) >= policy.cooldown_ms());
    if !cooled {
        return Decision::Hold;
    }
    let load = load_fraction(policy, latest);
    if load > policy.high_watermark && current_replicas < policy.max_replicas {
        Decision::ScaleUp
    } else if load < policy.low_watermark && current_replicas > policy.min_replicas {
        Decision::ScaleDown
    } else {
        Decision::Hold
    }
}

/// Applies `decision` to both replica counts by the same step, clamping each
/// to the policy bounds.
pub fn apply(
    decision: Decision,
    bbu_replicas: u32,
    rrh_replicas: u32,
    policy: &AutoscalePolicy,
) -> (u32, u32) {
    if decision == Decision::Hold {
        return (bbu_replicas, rrh_replicas);
    }
    let step = |r: u32| {
        let next = (i64::from(r) + decision.delta()).clamp(
            i64::from(policy.min_replicas),
            i64::from(policy.max_replicas),
        );
        next as u32
    };
    (step(bbu_replicas), step(rrh_replicas))
}
