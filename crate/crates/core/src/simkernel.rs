//! Tick-based simulation loop.
//!
//! One [`Simulation`] owns every piece of mutable state. Each call to
//! [`Simulation::step`] runs, in order: due timeline commands, set
//! reconcilers (declaration order), the scheduler, one lifecycle step per
//! pod, usage and fronthaul metering, the autoscaler, and metrics emission.
//! A global invariant sweep closes every step; any violation halts the run.
//!
//! Time is kept in integer milliseconds. A pod performs at most one phase
//! transition per tick.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::net::Ipv4Addr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autoscaler::{self, Decision};
use crate::cluster::{Cluster, ResourceUsage};
use crate::orchestrator::{
    self, ip_key, DiscoveryPolicy, OrchestratorError, SetAction, StatefulSetSpec, Transition,
    EPC_IP_KEY, NO_FEASIBLE_NODE,
};
use crate::pod::{pod_name, Phase, PodInstance, PodKind};
use crate::ranmodel::{self, FronthaulPair, MetricsSample, NodeSample, Rate};
use crate::registry::{Registry, WatchKind, WatchStream};
use crate::scenario::{Command, ScenarioConfig, ValidationError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invariant `{invariant}` violated at t={}: {detail}", fmt_ms(*.time_ms))]
    Invariant {
        invariant: &'static str,
        time_ms: u64,
        detail: String,
    },
    #[error("invalid scenario: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Scenario(Vec<ValidationError>),
}

/// Formats milliseconds as seconds with three decimals.
pub fn fmt_ms(ms: u64) -> String {
    format!("{}.{:03}", ms / 1000, ms % 1000)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    ScaleCmd,
    PhaseTransition,
    RegistryMutation,
    AutoscaleDecision,
    MetricsSample,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::ScaleCmd => "SCALE_CMD",
            EventKind::PhaseTransition => "PHASE_TRANSITION",
            EventKind::RegistryMutation => "REGISTRY_MUTATION",
            EventKind::AutoscaleDecision => "AUTOSCALE_DECISION",
            EventKind::MetricsSample => "METRICS_SAMPLE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleSource {
    Timeline,
    Autoscaler,
    Manual,
}

impl fmt::Display for ScaleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleSource::Timeline => "timeline",
            ScaleSource::Autoscaler => "autoscaler",
            ScaleSource::Manual => "manual",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventPayload {
    Scale {
        set: String,
        replicas: u32,
        source: ScaleSource,
    },
    Phase {
        pod: String,
        /// `None` when the pod was just created.
        from: Option<Phase>,
        to: Phase,
        reason: String,
    },
    Registry {
        op: WatchKind,
        key: String,
        revision: u64,
        value: String,
    },
    Autoscale {
        decision: Decision,
        load: f64,
        bbu_replicas: u32,
        rrh_replicas: u32,
    },
    Metrics {
        fh_throughput: Rate,
        pairs_active: u32,
        used: ResourceUsage,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time_ms: u64,
    /// Global, gap-free sequence number; with `time_ms` it totally orders the log.
    pub seq: u64,
    pub payload: EventPayload,
}

impl SimEvent {
    pub fn kind(&self) -> EventKind {
        match self.payload {
            EventPayload::Scale { .. } => EventKind::ScaleCmd,
            EventPayload::Phase { .. } => EventKind::PhaseTransition,
            EventPayload::Registry { .. } => EventKind::RegistryMutation,
            EventPayload::Autoscale { .. } => EventKind::AutoscaleDecision,
            EventPayload::Metrics { .. } => EventKind::MetricsSample,
        }
    }
}

/// One event-log line, e.g.
/// `10.000 57 PHASE_TRANSITION pod=bbu-0 from=DISCOVERING to=RUNNING reason="peer rrh-0 at 10.244.1.2"`.
impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} ", fmt_ms(self.time_ms), self.seq, self.kind())?;
        match &self.payload {
            EventPayload::Scale {
                set,
                replicas,
                source,
            } => {
                write!(f, "set={set} replicas={replicas} source={source}")
            }
            EventPayload::Phase {
                pod,
                from,
                to,
                reason,
            } => {
                let from = from.map_or("NONE", Phase::as_str);
                write!(f, "pod={pod} from={from} to={to} reason={reason:?}")
            }
            EventPayload::Registry {
                op,
                key,
                revision,
                value,
            } => {
                write!(f, "op={op} rev={revision} key={key} value={value:?}")
            }
            EventPayload::Autoscale {
                decision,
                load,
                bbu_replicas,
                rrh_replicas,
            } => {
                write!(
                    f,
                    "decision={decision} load={load:.3} bbu={bbu_replicas} rrh={rrh_replicas}"
                )
            }
            EventPayload::Metrics {
                fh_throughput,
                pairs_active,
                used,
            } => write!(
                f,
                "fh_mbps={fh_throughput} pairs_active={pairs_active} cpu_millicores={} mem_mib={}",
                used.cpu, used.mem
            ),
        }
    }
}

/// Everything a finished (or halted) run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub events: Vec<SimEvent>,
    pub samples: Vec<MetricsSample>,
    /// Pods still present at the end, in set/ordinal order.
    pub pods: Vec<PodInstance>,
    pub pairs: Vec<FronthaulPair>,
    pub steps: u64,
    pub halt: Option<SimError>,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    tick_ms: u64,
    now_ms: u64,
    steps: u64,
    cluster: Cluster,
    registry: Registry,
    registry_feed: WatchStream,
    sets: Vec<StatefulSetSpec>,
    pods: BTreeMap<String, PodInstance>,
    pairs: Vec<FronthaulPair>,
    discovery: DiscoveryPolicy,
    timeline_cursor: usize,
    rng: ChaCha8Rng,
    last_autoscale_ms: Option<u64>,
    events: Vec<SimEvent>,
    samples: Vec<MetricsSample>,
    /// Pods that already changed phase during the current tick.
    touched: HashSet<String>,
    halted: Option<SimError>,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate().map_err(SimError::Scenario)?;
        let cluster = Cluster::new(cfg.nodes.clone()).map_err(|e| {
            SimError::Scenario(vec![ValidationError {
                path: "nodes".into(),
                message: e.to_string(),
            }])
        })?;
        let mut registry = Registry::new();
        let registry_feed = registry.watch("", 0).expect("empty prefix is valid");
        let mut sim = Self {
            tick_ms: cfg.tick_ms(),
            now_ms: 0,
            steps: 0,
            cluster,
            registry,
            registry_feed,
            sets: cfg.sets.clone(),
            pods: BTreeMap::new(),
            pairs: Vec::new(),
            discovery: cfg.discovery.policy(),
            timeline_cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            last_autoscale_ms: None,
            events: Vec::new(),
            samples: Vec::new(),
            touched: HashSet::new(),
            halted: None,
            cfg: cfg.clone(),
        };
        if let Some(epc) = cfg.epc_ip {
            sim.registry
                .put(EPC_IP_KEY, epc.to_string())
                .expect("static key is valid");
            sim.drain_registry();
        }
        Ok(sim)
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    /// Direct cluster access, for fault injection in tests.
    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn pods(&self) -> impl Iterator<Item = &PodInstance> {
        let mut v: Vec<_> = self.pods.values().collect();
        v.sort_by_key(|p| self.order_key(p));
        v.into_iter()
    }

    pub fn pod(&self, name: &str) -> Option<&PodInstance> {
        self.pods.get(name)
    }

    pub fn pairs(&self) -> &[FronthaulPair] {
        &self.pairs
    }

    pub fn sets(&self) -> &[StatefulSetSpec] {
        &self.sets
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn samples(&self) -> &[MetricsSample] {
        &self.samples
    }

    pub fn halted(&self) -> Option<&SimError> {
        self.halted.as_ref()
    }

    /// Out-of-band scale command, applied immediately and logged.
    pub fn scale(&mut self, set: &str, replicas: u32) -> bool {
        self.set_replicas(set, replicas, ScaleSource::Manual)
    }

    fn set_replicas(&mut self, set: &str, replicas: u32, source: ScaleSource) -> bool {
        let Some(spec) = self.sets.iter_mut().find(|s| s.name == set) else {
            return false;
        };
        spec.replicas = replicas;
        self.log(EventPayload::Scale {
            set: set.to_owned(),
            replicas,
            source,
        });
        true
    }

    fn order_key(&self, pod: &PodInstance) -> (usize, u32, String) {
        let set_idx = pod
            .set
            .as_ref()
            .and_then(|s| self.sets.iter().position(|x| &x.name == s))
            .unwrap_or(usize::MAX);
        (set_idx, pod.ordinal.unwrap_or(u32::MAX), pod.name.clone())
    }

    fn log(&mut self, payload: EventPayload) {
        let seq = self.events.len() as u64;
        self.events.push(SimEvent {
            time_ms: self.now_ms,
            seq,
            payload,
        });
    }

    fn drain_registry(&mut self) {
        for ev in self.registry_feed.drain() {
            let value = String::from_utf8_lossy(&ev.entry.value).into_owned();
            self.log(EventPayload::Registry {
                op: ev.kind,
                key: ev.entry.key,
                revision: ev.revision,
                value,
            });
        }
    }

    fn violation(&self, invariant: &'static str, detail: impl Into<String>) -> SimError {
        SimError::Invariant {
            invariant,
            time_ms: self.now_ms,
            detail: detail.into(),
        }
    }

    /// Logs a transition (after any registry writes it caused), enforces
    /// single-transition pacing, and refreshes fronthaul pairs.
    fn record(&mut self, t: Transition) -> Result<(), SimError> {
        self.drain_registry();
        if !self.touched.insert(t.pod.clone()) {
            return Err(self.violation(
                "single-transition-pacing",
                format!("{} changed phase twice in one tick", t.pod),
            ));
        }
        let now = self.now_ms;
        let pods = &self.pods;
        ranmodel::on_phase_change(
            &t.pod,
            &mut self.pairs,
            |n| pods.get(n).map(|p| p.phase),
            now,
        );
        self.log(EventPayload::Phase {
            pod: t.pod,
            from: Some(t.from),
            to: t.to,
            reason: t.reason,
        });
        Ok(())
    }

    fn lifecycle_error(&self, e: OrchestratorError) -> SimError {
        match e {
            OrchestratorError::IllegalTransition { .. } => {
                self.violation("phase-order", e.to_string())
            }
            OrchestratorError::DuplicateOrdinal { .. } | OrchestratorError::ForeignPod { .. } => {
                self.violation("ordinal-uniqueness", e.to_string())
            }
            _ => self.violation("lifecycle", e.to_string()),
        }
    }

    /// Advances the simulation by one tick.
    pub fn step(&mut self) -> Result<(), SimError> {
        if let Some(err) = &self.halted {
            return Err(err.clone());
        }
        let result = self.step_inner();
        if let Err(e) = &result {
            self.halted = Some(e.clone());
        }
        result
    }

    fn step_inner(&mut self) -> Result<(), SimError> {
        self.touched.clear();
        self.apply_timeline();
        self.reconcile_sets()?;
        self.schedule_pending()?;
        self.progress_lifecycles()?;
        let sample = self.measure();
        self.samples.push(sample);
        self.autoscale();
        let last = self.samples.last().expect("just pushed");
        let payload = EventPayload::Metrics {
            fh_throughput: last.fh_throughput,
            pairs_active: last.pairs_active,
            used: last.totals().0,
        };
        self.log(payload);
        self.check_invariants()?;
        self.steps += 1;
        self.now_ms = self.steps * self.tick_ms;
        Ok(())
    }

    fn apply_timeline(&mut self) {
        while let Some(entry) = self.cfg.timeline.get(self.timeline_cursor) {
            let due = crate::scenario::secs_to_ms(entry.time_s).unwrap_or(u64::MAX);
            if due > self.now_ms {
                break;
            }
            let Command::Scale { set, replicas } = entry.command.clone();
            self.timeline_cursor += 1;
            self.set_replicas(&set, replicas, ScaleSource::Timeline);
        }
    }

    fn reconcile_sets(&mut self) -> Result<(), SimError> {
        for idx in 0..self.sets.len() {
            let set = self.sets[idx].clone();
            let live: Vec<&PodInstance> = self
                .pods
                .values()
                .filter(|p| p.set.as_deref() == Some(set.name.as_str()))
                .collect();
            let actions =
                orchestrator::reconcile(&set, &live).map_err(|e| self.lifecycle_error(e))?;
            for action in actions {
                match action {
                    SetAction::Create { ordinal, .. } => self.create_pod(&set, ordinal)?,
                    SetAction::Delete { name } => {
                        let pod = self
                            .pods
                            .get_mut(&name)
                            .expect("reconcile only names live pods");
                        let t = orchestrator::terminate_pod(
                            pod,
                            &mut self.registry,
                            &mut self.cluster,
                            "scale down",
                        )
                        .map_err(|e| self.lifecycle_error(e))?;
                        if let Some(t) = t {
                            self.record(t)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn create_pod(&mut self, set: &StatefulSetSpec, ordinal: u32) -> Result<(), SimError> {
        let mut pod = PodInstance::new(&set.name, set.kind, ordinal, set.requests);
        match set.kind {
            PodKind::Bbu => {
                let rrh_set = self.cfg.set_of_kind(PodKind::Rrh).map(|s| s.name.clone());
                if let Some(rrh_set) = rrh_set {
                    let peer = orchestrator::pair_in(&rrh_set, ordinal);
                    self.pairs
                        .push(FronthaulPair::new(&pod.name, &peer, self.cfg.fh_rate_mbps));
                    pod.peer = Some(peer);
                }
            }
            PodKind::Rrh => {
                pod.peer = self
                    .cfg
                    .set_of_kind(PodKind::Bbu)
                    .map(|s| pod_name(&s.name, ordinal));
            }
            PodKind::Epc => {}
        }
        let name = pod.name.clone();
        if self.pods.insert(name.clone(), pod).is_some() {
            return Err(self.violation("ordinal-uniqueness", format!("{name} created twice")));
        }
        self.touched.insert(name.clone());
        self.log(EventPayload::Phase {
            pod: name,
            from: None,
            to: Phase::Pending,
            reason: format!("created by {} reconcile", set.name),
        });
        Ok(())
    }

    fn schedule_pending(&mut self) -> Result<(), SimError> {
        let mut pending: Vec<&PodInstance> = self
            .pods
            .values()
            .filter(|p| p.phase == Phase::Pending && !self.touched.contains(&p.name))
            .collect();
        pending.sort_by_key(|p| self.order_key(p));
        let pending: Vec<String> = pending.into_iter().map(|p| p.name.clone()).collect();

        let mut batch = Vec::with_capacity(pending.len());
        for name in &pending {
            let pod = &self.pods[name];
            let set = pod
                .set
                .as_deref()
                .and_then(|s| self.sets.iter().find(|x| x.name == s));
            let Some(set) = set else {
                return Err(self.violation("lifecycle", format!("{name} has no owning set")));
            };
            batch.push((pod, &set.placement));
        }
        let choices = orchestrator::place_batch(&batch, &self.cluster, self.pods.values());

        for (name, choice) in pending.into_iter().zip(choices) {
            let Some(node) = choice else {
                self.pods.get_mut(&name).expect("present").pending_reason =
                    Some(NO_FEASIBLE_NODE.to_owned());
                continue;
            };
            self.check_ordered_creation(&self.pods[&name])?;
            let pod = self.pods.get_mut(&name).expect("present");
            let t = orchestrator::bind(pod, &mut self.cluster, &node)
                .map_err(|e| self.lifecycle_error(e))?;
            self.record(t)?;
        }
        Ok(())
    }

    fn check_ordered_creation(&self, pod: &PodInstance) -> Result<(), SimError> {
        let (Some(set), Some(ordinal)) = (&pod.set, pod.ordinal) else {
            return Ok(());
        };
        if ordinal == 0 {
            return Ok(());
        }
        let prev = pod_name(set, ordinal - 1);
        match self.pods.get(&prev) {
            Some(p) if p.phase == Phase::Running => Ok(()),
            other => Err(self.violation(
                "ordered-creation",
                format!(
                    "{} leaving PENDING while {prev} is {}",
                    pod.name,
                    other.map_or("absent", |p| p.phase.as_str())
                ),
            )),
        }
    }

    fn progress_lifecycles(&mut self) -> Result<(), SimError> {
        let mut order: Vec<&PodInstance> = self
            .pods
            .values()
            .filter(|p| {
                !self.touched.contains(&p.name)
                    && matches!(
                        p.phase,
                        Phase::Scheduled
                            | Phase::Starting
                            | Phase::Registering
                            | Phase::Discovering
                            | Phase::Terminating
                    )
            })
            .collect();
        order.sort_by_key(|p| self.order_key(p));
        let mut order: Vec<String> = order.into_iter().map(|p| p.name.clone()).collect();
        if self.cfg.interleave {
            order.shuffle(&mut self.rng);
        }

        for name in order {
            let now = self.now_ms;
            let mode = self.cfg.ue_mode;
            let pod = self.pods.get_mut(&name).expect("present");
            let outcome = match (pod.phase, pod.kind) {
                (Phase::Scheduled, _) => orchestrator::start_container(pod).map(Some),
                (Phase::Terminating, _) => orchestrator::finish_termination(pod),
                (_, PodKind::Rrh) => match orchestrator::start_rrh(pod, &mut self.registry, mode) {
                    // a failed registry write leaves the pod REGISTERING; retried next tick
                    Err(OrchestratorError::Registry(_)) => Ok(None),
                    other => other.map(Some),
                },
                (_, PodKind::Bbu) => {
                    orchestrator::start_bbu(pod, &mut self.registry, now, &self.discovery)
                }
                (phase, _) => Err(OrchestratorError::WrongPhase {
                    pod: name.clone(),
                    op: "lifecycle",
                    expected: "a BBU or RRH",
                    found: phase,
                }),
            };
            let Some(t) = outcome.map_err(|e| self.lifecycle_error(e))? else {
                continue;
            };
            if t.to == Phase::Running {
                self.check_discovery_safety(&name)?;
            }
            let gone = t.to == Phase::Gone;
            if gone {
                self.pods.remove(&name);
                self.pairs.retain(|p| p.bbu != name);
            }
            self.record(t)?;
        }
        Ok(())
    }

    /// A BBU may only be RUNNING if its peer's address key is in the registry.
    fn check_discovery_safety(&self, name: &str) -> Result<(), SimError> {
        let pod = &self.pods[name];
        if pod.kind != PodKind::Bbu {
            return Ok(());
        }
        let peer = pod.peer.as_deref().unwrap_or("<none>");
        let present = self.registry.get(&ip_key(peer)).ok().flatten().is_some();
        if present {
            Ok(())
        } else {
            Err(self.violation(
                "discovery-safety",
                format!("{name} RUNNING without {} in the registry", ip_key(peer)),
            ))
        }
    }

    fn measure(&mut self) -> MetricsSample {
        let mode = self.cfg.ue_mode;
        let profile = self.cfg.profile;
        let mut nodes = Vec::new();
        let specs: Vec<_> = self.cluster.nodes().cloned().collect();
        for node in specs {
            let used = if self.cfg.usage_jitter {
                let mut running: Vec<&PodInstance> = self
                    .pods
                    .values()
                    .filter(|p| {
                        p.node.as_deref() == Some(node.name.as_str()) && p.phase == Phase::Running
                    })
                    .collect();
                running.sort_by_key(|p| self.order_key(p));
                let draws: Vec<ResourceUsage> = running
                    .iter()
                    .map(|p| ranmodel::usage(p, mode, &profile))
                    .collect();
                draws
                    .into_iter()
                    .map(|u| ranmodel::jitter(u, &mut self.rng))
                    .sum()
            } else {
                ranmodel::node_usage(&node, self.pods.values(), mode, &profile)
            };
            nodes.push(NodeSample {
                node: node.name.clone(),
                used,
                capacity: ResourceUsage::new(node.cpu_capacity, node.mem_capacity),
            });
        }
        MetricsSample {
            time_ms: self.now_ms,
            nodes,
            fh_throughput: ranmodel::aggregate_fh(&self.pairs),
            pairs_active: self.pairs.iter().filter(|p| p.active).count() as u32,
        }
    }

    fn autoscale(&mut self) {
        let policy = self.cfg.policy;
        if !policy.enabled {
            return;
        }
        let (Some(bbu), Some(rrh)) = (
            self.sets
                .iter()
                .find(|s| s.kind == PodKind::Bbu)
                .map(|s| (s.name.clone(), s.replicas)),
            self.sets
                .iter()
                .find(|s| s.kind == PodKind::Rrh)
                .map(|s| (s.name.clone(), s.replicas)),
        ) else {
            return;
        };
        let decision = autoscaler::evaluate(
            &policy,
            &self.samples,
            bbu.1,
            self.last_autoscale_ms,
            self.now_ms,
        );
        if decision == Decision::Hold {
            return;
        }
        let load = autoscaler::load_fraction(&policy, self.samples.last().expect("sample pushed"));
        let (b, r) = autoscaler::apply(decision, bbu.1, rrh.1, &policy);
        self.last_autoscale_ms = Some(self.now_ms);
        self.log(EventPayload::Autoscale {
            decision,
            load,
            bbu_replicas: b,
            rrh_replicas: r,
        });
        self.set_replicas(&rrh.0, r, ScaleSource::Autoscaler);
        self.set_replicas(&bbu.0, b, ScaleSource::Autoscaler);
    }

    /// Ordinal uniqueness, address uniqueness and confinement, capacity
    /// safety, and fronthaul pair consistency.
    pub fn check_invariants(&self) -> Result<(), SimError> {
        let mut ordinals: BTreeSet<(&str, u32)> = BTreeSet::new();
        let mut ips: BTreeMap<Ipv4Addr, &str> = BTreeMap::new();
        let mut committed: BTreeMap<&str, ResourceUsage> = BTreeMap::new();

        for pod in self.pods.values() {
            if let (Some(set), Some(o)) = (pod.set.as_deref(), pod.ordinal) {
                if !ordinals.insert((set, o)) || pod.name != pod_name(set, o) {
                    return Err(self.violation(
                        "ordinal-uniqueness",
                        format!("{set} ordinal {o} ({})", pod.name),
                    ));
                }
            }
            if let Some(ip) = pod.ip {
                let Some(node) = pod.node.as_deref() else {
                    return Err(self.violation(
                        "cidr-confinement",
                        format!("{} has {ip} but no node", pod.name),
                    ));
                };
                let cidr = self.cluster.node(node).map(|n| n.pod_cidr);
                if !cidr.is_ok_and(|c| c.contains(ip)) {
                    return Err(self.violation(
                        "cidr-confinement",
                        format!("{} at {ip} outside {node}", pod.name),
                    ));
                }
                if let Some(other) = ips.insert(ip, &pod.name) {
                    return Err(self.violation(
                        "ip-uniqueness",
                        format!("{ip} held by {other} and {}", pod.name),
                    ));
                }
            }
            if let Some(node) = pod.node.as_deref() {
                *committed.entry(node).or_default() += pod.requests;
            }
        }

        for node in self.cluster.nodes() {
            let booked: BTreeSet<Ipv4Addr> = self
                .cluster
                .allocated_ips(&node.name)
                .expect("known node")
                .collect();
            let held: BTreeSet<Ipv4Addr> = ips
                .keys()
                .copied()
                .filter(|ip| node.pod_cidr.contains(*ip))
                .collect();
            if booked != held {
                return Err(self.violation(
                    "ip-uniqueness",
                    format!(
                        "{}: allocator holds {booked:?}, pods hold {held:?}",
                        node.name
                    ),
                ));
            }
            let sum = committed
                .get(node.name.as_str())
                .copied()
                .unwrap_or_default();
            let booked = self.cluster.committed(&node.name).expect("known node");
            if sum != booked || sum.cpu > node.cpu_capacity || sum.mem > node.mem_capacity {
                return Err(self.violation(
                    "capacity-safety",
                    format!(
                        "{}: pods request {}m/{}MiB, booked {}m/{}MiB, capacity {}m/{}MiB",
                        node.name,
                        sum.cpu,
                        sum.mem,
                        booked.cpu,
                        booked.mem,
                        node.cpu_capacity,
                        node.mem_capacity
                    ),
                ));
            }
        }

        let running = |n: &str| self.pods.get(n).is_some_and(|p| p.phase == Phase::Running);
        for pair in &self.pairs {
            if pair.active != (running(&pair.bbu) && running(&pair.rrh)) {
                return Err(self.violation(
                    "pair-consistency",
                    format!("{}<->{} active={}", pair.bbu, pair.rrh, pair.active),
                ));
            }
        }
        let has_rrh_set = self.cfg.set_of_kind(PodKind::Rrh).is_some();
        for pod in self
            .pods
            .values()
            .filter(|p| p.kind == PodKind::Bbu && has_rrh_set)
        {
            if self.pairs.iter().filter(|p| p.bbu == pod.name).count() != 1 {
                return Err(self.violation(
                    "pair-consistency",
                    format!("{} lacks exactly one pair", pod.name),
                ));
            }
        }
        Ok(())
    }

    /// Number of steps `run_for` executes for `duration_ms`.
    pub fn steps_for(&self, duration_ms: u64) -> u64 {
        duration_ms.div_ceil(self.tick_ms)
    }

    /// Executes `ceil(duration / tick)` steps, stopping early on a halt.
    pub fn run_for(&mut self, duration_ms: u64) -> Result<(), SimError> {
        for _ in 0..self.steps_for(duration_ms) {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> RunOutcome {
        let mut pods: Vec<PodInstance> = self.pods.values().cloned().collect();
        pods.sort_by_key(|p| self.order_key(p));
        RunOutcome {
            events: self.events,
            samples: self.samples,
            pods,
            pairs: self.pairs,
            steps: self.steps,
            halt: self.halted,
        }
    }
}

/// Runs a scenario for its configured duration (or `duration_ms`). Only an
/// invalid scenario is an `Err`; invariant halts are reported in
/// [`RunOutcome::halt`] together with everything logged up to that point.
pub fn run(cfg: &ScenarioConfig, duration_ms: Option<u64>) -> Result<RunOutcome, SimError> {
    let mut sim = Simulation::new(cfg)?;
    let duration = duration_ms.unwrap_or_else(|| cfg.duration_ms());
    let _ = sim.run_for(duration);
    Ok(sim.into_outcome())
}
