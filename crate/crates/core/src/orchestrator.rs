//! Ordered pod-set reconciliation, constraint-aware scheduling, and the
//! per-pod lifecycle steps that implement RRH-first discovery.
//!
//! Every function here performs at most one phase transition per call; the
//! simulation kernel decides when to call them.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{Admission, Cluster, ClusterError, NodeRole, NodeSpec, ResourceUsage};
use crate::pod::{pod_name, Phase, PodInstance, PodKind};
use crate::ranmodel::UeMode;
use crate::registry::{Registry, RegistryError};

/// Reason recorded on a pod that no node can currently host.
pub const NO_FEASIBLE_NODE: &str = "no feasible node";
/// Diagnostic set on a BBU whose discovery retry budget ran out.
pub const FAILED_DISCOVERY: &str = "FAILED-DISCOVERY";
/// Registry key under which the (static) core network address lives.
pub const EPC_IP_KEY: &str = "pods/epc/ip";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("set {set:?}: ordinal {ordinal} held by more than one live pod")]
    DuplicateOrdinal { set: String, ordinal: u32 },
    #[error("pod {pod:?} does not belong to set {set:?}")]
    ForeignPod { pod: String, set: String },
    #[error("pod {pod:?}: illegal transition {from} -> {to}")]
    IllegalTransition { pod: String, from: Phase, to: Phase },
    #[error("pod {pod:?}: {op} requires phase {expected}, found {found}")]
    WrongPhase {
        pod: String,
        op: &'static str,
        expected: &'static str,
        found: Phase,
    },
    #[error("pod {pod:?} does not fit on node {node:?}")]
    Rejected { pod: String, node: String },
    #[error("pod {0:?} has no peer assigned")]
    NoPeer(String),
    #[error("registry: {0}")]
    Registry(#[from] RegistryError),
    #[error("cluster: {0}")]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RoleSelector {
    Master,
    Worker,
    Any,
}

impl RoleSelector {
    pub fn matches(self, role: NodeRole) -> bool {
        match self {
            RoleSelector::Any => true,
            RoleSelector::Master => role == NodeRole::Master,
            RoleSelector::Worker => role == NodeRole::Worker,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub node_role: RoleSelector,
    /// At most one pod of the set per node.
    #[serde(default)]
    pub anti_affinity: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatefulSetSpec {
    pub name: String,
    pub kind: PodKind,
    pub replicas: u32,
    pub requests: ResourceUsage,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SetAction {
    Create { name: String, ordinal: u32 },
    Delete { name: String },
}

impl fmt::Display for SetAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SetAction::Create { name, .. } => write!(f, "CREATE {name}"),
            SetAction::Delete { name } => write!(f, "DELETE {name}"),
        }
    }
}

/// One reconcile pass for `set`.
///
/// Pods with ordinals at or above `replicas` are deleted highest ordinal
/// first, all in the same pass. At most one pod is created per pass: the
/// lowest missing ordinal `i`, and only once ordinals `0..i` are all RUNNING.
/// `live` must hold every not-yet-GONE pod of the set.
pub fn reconcile(
    set: &StatefulSetSpec,
    live: &[&PodInstance],
) -> Result<Vec<SetAction>, OrchestratorError> {
    let mut by_ordinal: BTreeMap<u32, &PodInstance> = BTreeMap::new();
    for pod in live {
        let ordinal = match (&pod.set, pod.ordinal) {
            (Some(s), Some(o)) if *s == set.name => o,
            _ => {
                return Err(OrchestratorError::ForeignPod {
                    pod: pod.name.clone(),
                    set: set.name.clone(),
                })
            }
        };
        if by_ordinal.insert(ordinal, pod).is_some() {
            return Err(OrchestratorError::DuplicateOrdinal {
                set: set.name.clone(),
                ordinal,
            });
        }
    }

    let mut actions: Vec<SetAction> = by_ordinal
        .range(set.replicas..)
        .rev()
        .filter(|(_, p)| p.phase < Phase::Terminating)
        .map(|(_, p)| SetAction::Delete {
            name: p.name.clone(),
        })
        .collect();

    if let Some(missing) = (0..set.replicas).find(|o| !by_ordinal.contains_key(o)) {
        let predecessors_ready = by_ordinal
            .range(..missing)
            .all(|(_, p)| p.phase == Phase::Running);
        if predecessors_ready {
            actions.push(SetAction::Create {
                name: pod_name(&set.name, missing),
                ordinal: missing,
            });
        }
    }
    Ok(actions)
}

/// Name of the RRH paired with BBU ordinal `bbu_ordinal` when the RRH set is
/// named `rrh`.
pub fn pair(bbu_ordinal: u32) -> String {
    pair_in("rrh", bbu_ordinal)
}

/// Equal-ordinal pairing against an arbitrarily named RRH set.
pub fn pair_in(rrh_set: &str, bbu_ordinal: u32) -> String {
    pod_name(rrh_set, bbu_ordinal)
}

/// Whether `node` may host `pod` right now.
pub fn node_feasible<'a>(
    pod: &PodInstance,
    placement: &Placement,
    node: &NodeSpec,
    cluster: &Cluster,
    pods: impl IntoIterator<Item = &'a PodInstance>,
) -> bool {
    if !placement.node_role.matches(node.role) {
        return false;
    }
    if placement.anti_affinity
        && pods.into_iter().any(|p| {
            p.is_live()
                && p.name != pod.name
                && p.set == pod.set
                && p.node.as_deref() == Some(node.name.as_str())
        })
    {
        return false;
    }
    matches!(
        cluster.admit(pod.requests, &node.name),
        Ok(Admission::Accept)
    ) && cluster.has_free_ip(&node.name).unwrap_or(false)
}

/// Picks a node for a PENDING pod: role selector, anti-affinity, capacity and
/// a free address must all hold. Ties go to the lowest committed-CPU
/// fraction, then to the lexicographically smallest name.
pub fn schedule<'a>(
    pod: &PodInstance,
    placement: &Placement,
    cluster: &Cluster,
    pods: impl IntoIterator<Item = &'a PodInstance> + Clone,
) -> Result<String, String> {
    cluster
        .nodes()
        .filter(|n| node_feasible(pod, placement, n, cluster, pods.clone()))
        .min_by(|a, b| cpu_fraction_cmp(cluster, a, b).then_with(|| a.name.cmp(&b.name)))
        .map(|n| n.name.clone())
        .ok_or_else(|| NO_FEASIBLE_NODE.to_owned())
}

/// Nodes that may host `pod`, best first by the [`schedule`] preference.
fn ranked_nodes<'a>(
    pod: &PodInstance,
    placement: &Placement,
    cluster: &Cluster,
    pods: impl IntoIterator<Item = &'a PodInstance> + Clone,
) -> Vec<String> {
    let mut nodes: Vec<&NodeSpec> = cluster
        .nodes()
        .filter(|n| node_feasible(pod, placement, n, cluster, pods.clone()))
        .collect();
    nodes.sort_by(|a, b| cpu_fraction_cmp(cluster, a, b).then_with(|| a.name.cmp(&b.name)));
    nodes.into_iter().map(|n| n.name.clone()).collect()
}

/// Jointly places several PENDING pods, given in priority order, on top of
/// the `existing` pods. Returns one node (or `None`) per pod.
///
/// Searches assignments depth-first, trying each pod's nodes in [`schedule`]
/// preference order, so whenever one-at-a-time greedy placement succeeds the
/// result equals it. Otherwise the search backtracks: a full placement is
/// found whenever one exists. If none exists, the most pods are placed, with
/// ties going to earlier pods.
pub fn place_batch<'a>(
    batch: &[(&PodInstance, &Placement)],
    cluster: &Cluster,
    existing: impl IntoIterator<Item = &'a PodInstance>,
) -> Vec<Option<String>> {
    struct Search<'s> {
        batch: &'s [(&'s PodInstance, &'s Placement)],
        existing: Vec<&'s PodInstance>,
        placed: Vec<PodInstance>,
        choice: Vec<Option<String>>,
        best: Option<(usize, Vec<Option<String>>)>,
    }

    impl Search<'_> {
        /// Returns true once a full placement has been recorded.
        fn dfs(&mut self, i: usize, cluster: &Cluster) -> bool {
            let n = self.batch.len();
            let count = self.choice.iter().flatten().count();
            if i == n {
                let better = match &self.best {
                    None => true,
                    Some((c, prev)) => {
                        count > *c
                            || (count == *c
                                && self
                                    .choice
                                    .iter()
                                    .map(Option::is_some)
                                    .gt(prev.iter().map(Option::is_some)))
                    }
                };
                if better {
                    self.best = Some((count, self.choice.clone()));
                }
                return count == n;
            }
            let (pod, placement) = self.batch[i];
            let ranked = {
                let pods = self.existing.iter().copied().chain(self.placed.iter());
                ranked_nodes(pod, placement, cluster, pods)
            };
            for node in ranked {
                let mut trial = cluster.clone();
                let mut p = pod.clone();
                if bind(&mut p, &mut trial, &node).is_err() {
                    continue;
                }
                self.placed.push(p);
                self.choice.push(Some(node));
                let done = self.dfs(i + 1, &trial);
                self.choice.pop();
                self.placed.pop();
                if done {
                    return true;
                }
            }
            // leaving pod i out can only tie the best if all later pods fit
            let bound = count + (n - i - 1);
            if self.best.as_ref().is_some_and(|(c, _)| *c >= bound) {
                return false;
            }
            self.choice.push(None);
            let done = self.dfs(i + 1, cluster);
            self.choice.pop();
            done
        }
    }

    let mut search = Search {
        batch,
        existing: existing.into_iter().collect(),
        placed: Vec::new(),
        choice: Vec::new(),
        best: None,
    };
    search.dfs(0, cluster);
    search.best.map(|(_, c)| c).unwrap_or_default()
}

/// Exact comparison of committed/capacity CPU fractions.
fn cpu_fraction_cmp(cluster: &Cluster, a: &NodeSpec, b: &NodeSpec) -> Ordering {
    let ca = cluster.committed(&a.name).map(|c| c.cpu).unwrap_or(0) as u128;
    let cb = cluster.committed(&b.name).map(|c| c.cpu).unwrap_or(0) as u128;
    (ca * b.cpu_capacity as u128).cmp(&(cb * a.cpu_capacity as u128))
}

/// A phase change performed by one lifecycle step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub pod: String,
    pub from: Phase,
    pub to: Phase,
    pub reason: String,
}

fn advance(
    pod: &mut PodInstance,
    to: Phase,
    reason: impl Into<String>,
) -> Result<Transition, OrchestratorError> {
    let from = pod.phase;
    if !from.can_transition(to, pod.kind) {
        return Err(OrchestratorError::IllegalTransition {
            pod: pod.name.clone(),
            from,
            to,
        });
    }
    pod.phase = to;
    Ok(Transition {
        pod: pod.name.clone(),
        from,
        to,
        reason: reason.into(),
    })
}

/// Registry keys a pod publishes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscoveryRecord {
    pub pod_name: String,
    pub ip_key: String,
    /// Present only when the UE is emulated.
    pub sim_key: Option<String>,
}

impl DiscoveryRecord {
    pub fn new(pod_name: &str, mode: UeMode) -> Self {
        Self {
            pod_name: pod_name.to_owned(),
            ip_key: ip_key(pod_name),
            sim_key: (mode == UeMode::Oaisim).then(|| sim_key(pod_name)),
        }
    }
}

pub fn ip_key(pod: &str) -> String {
    format!("pods/{pod}/ip")
}

pub fn sim_key(pod: &str) -> String {
    format!("pods/{pod}/sim")
}

/// Opaque subscriber record stored for an emulated UE.
pub fn sim_record(pod: &PodInstance) -> String {
    let ordinal = pod.ordinal.unwrap_or(0);
    format!(
        "imsi={:015};opc=opaque;rrh={}",
        208_930_000_000_001u64 + u64::from(ordinal),
        pod.name
    )
}

/// Places a PENDING pod on `node`: reserves its requests, allocates its
/// address, and moves it to SCHEDULED. Nothing changes on failure.
pub fn bind(
    pod: &mut PodInstance,
    cluster: &mut Cluster,
    node: &str,
) -> Result<Transition, OrchestratorError> {
    if pod.phase != Phase::Pending {
        return Err(OrchestratorError::WrongPhase {
            pod: pod.name.clone(),
            op: "bind",
            expected: "PENDING",
            found: pod.phase,
        });
    }
    if cluster.commit(pod.requests, node)? == Admission::Reject {
        return Err(OrchestratorError::Rejected {
            pod: pod.name.clone(),
            node: node.to_owned(),
        });
    }
    let ip = match cluster.allocate_ip(node) {
        Ok(ip) => ip,
        Err(e) => {
            cluster.uncommit(pod.requests, node)?;
            return Err(e.into());
        }
    };
    pod.node = Some(node.to_owned());
    pod.ip = Some(ip);
    pod.pending_reason = None;
    advance(pod, Phase::Scheduled, format!("bound to {node} at {ip}"))
}

/// Moves a SCHEDULED pod to STARTING.
pub fn start_container(pod: &mut PodInstance) -> Result<Transition, OrchestratorError> {
    if pod.ip.is_none() || pod.node.is_none() {
        return Err(OrchestratorError::WrongPhase {
            pod: pod.name.clone(),
            op: "start_container",
            expected: "SCHEDULED with an address",
            found: pod.phase,
        });
    }
    advance(pod, Phase::Starting, "container started")
}

/// One lifecycle step of an RRH.
///
/// From STARTING the pod moves to REGISTERING. From REGISTERING it publishes
/// its SIM record (emulated UE only) and then its address, and becomes
/// RUNNING. A failed write leaves the pod in REGISTERING so the next step
/// retries.
pub fn start_rrh(
    pod: &mut PodInstance,
    registry: &mut Registry,
    mode: UeMode,
) -> Result<Transition, OrchestratorError> {
    match pod.phase {
        Phase::Starting => advance(pod, Phase::Registering, "registering discovery record"),
        Phase::Registering => {
            let ip = pod.ip.ok_or_else(|| OrchestratorError::WrongPhase {
                pod: pod.name.clone(),
                op: "start_rrh",
                expected: "an allocated address",
                found: pod.phase,
            })?;
            let record = DiscoveryRecord::new(&pod.name, mode);
            // the address goes last so its presence implies the SIM record
            if let Some(key) = &record.sim_key {
                registry.put(key, sim_record(pod))?;
            }
            registry.put(&record.ip_key, ip.to_string())?;
            advance(pod, Phase::Running, format!("registered {ip}"))
        }
        found => Err(OrchestratorError::WrongPhase {
            pod: pod.name.clone(),
            op: "start_rrh",
            expected: "STARTING or REGISTERING",
            found,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryPolicy {
    /// Fixed wait between lookups, in simulated milliseconds.
    pub retry_interval_ms: u64,
    /// `None` retries forever.
    pub max_retries: Option<u32>,
}

impl Default for DiscoveryPolicy {
    fn default() -> Self {
        Self {
            retry_interval_ms: 1000,
            max_retries: None,
        }
    }
}

/// One lifecycle step of a BBU.
///
/// From STARTING the pod moves to DISCOVERING. From DISCOVERING, once the
/// retry timer allows, it looks up its peer RRH's address. If present it
/// records the address, publishes its own, and becomes RUNNING. If absent it
/// stays DISCOVERING and schedules the next lookup; when the retry budget is
/// spent it is flagged with [`FAILED_DISCOVERY`] and stops looking.
///
/// Returns `Ok(None)` when no transition happened.
pub fn start_bbu(
    pod: &mut PodInstance,
    registry: &mut Registry,
    now_ms: u64,
    policy: &DiscoveryPolicy,
) -> Result<Option<Transition>, OrchestratorError> {
    match pod.phase {
        Phase::Starting => {
            pod.next_attempt_ms = now_ms;
            let peer = pod
                .peer
                .as_deref()
                .ok_or_else(|| OrchestratorError::NoPeer(pod.name.clone()))?;
            let reason = format!("looking up {peer}");
            advance(pod, Phase::Discovering, reason).map(Some)
        }
        Phase::Discovering => {
            if pod.diagnostic.is_some() || now_ms < pod.next_attempt_ms {
                return Ok(None);
            }
            let peer = pod
                .peer
                .clone()
                .ok_or_else(|| OrchestratorError::NoPeer(pod.name.clone()))?;
            pod.discovery_attempts += 1;
            let found = registry
                .get(&ip_key(&peer))?
                .and_then(|v| std::str::from_utf8(v).ok()?.parse::<Ipv4Addr>().ok());
            match found {
                Some(peer_ip) => {
                    let own = pod.ip.ok_or_else(|| OrchestratorError::WrongPhase {
                        pod: pod.name.clone(),
                        op: "start_bbu",
                        expected: "an allocated address",
                        found: pod.phase,
                    })?;
                    registry.put(&ip_key(&pod.name), own.to_string())?;
                    pod.peer_ip = Some(peer_ip);
                    advance(pod, Phase::Running, format!("peer {peer} at {peer_ip}")).map(Some)
                }
                None => {
                    pod.next_attempt_ms = now_ms + policy.retry_interval_ms;
                    if policy
                        .max_retries
                        .is_some_and(|m| pod.discovery_attempts >= m)
                    {
                        pod.diagnostic = Some(FAILED_DISCOVERY.to_owned());
                    }
                    Ok(None)
                }
            }
        }
        found => Err(OrchestratorError::WrongPhase {
            pod: pod.name.clone(),
            op: "start_bbu",
            expected: "STARTING or DISCOVERING",
            found,
        }),
    }
}

/// Begins teardown: removes the pod's registry keys, frees its address and
/// reservation, and moves it to TERMINATING. Pods already TERMINATING or
/// GONE are left alone.
pub fn terminate_pod(
    pod: &mut PodInstance,
    registry: &mut Registry,
    cluster: &mut Cluster,
    reason: &str,
) -> Result<Option<Transition>, OrchestratorError> {
    if pod.phase >= Phase::Terminating {
        return Ok(None);
    }
    registry.delete(&ip_key(&pod.name))?;
    registry.delete(&sim_key(&pod.name))?;
    if let Some(node) = pod.node.take() {
        if let Some(ip) = pod.ip.take() {
            cluster.release_ip(&node, ip)?;
        }
        cluster.uncommit(pod.requests, &node)?;
    }
    advance(pod, Phase::Terminating, reason).map(Some)
}

/// TERMINATING -> GONE. No-op for pods in any other phase.
pub fn finish_termination(pod: &mut PodInstance) -> Result<Option<Transition>, OrchestratorError> {
    if pod.phase != Phase::Terminating {
        return Ok(None);
    }
    advance(pod, Phase::Gone, "terminated").map(Some)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::cluster::default_pod_cidr;

    fn set(
        name: &str,
        kind: PodKind,
        replicas: u32,
        role: RoleSelector,
        anti: bool,
    ) -> StatefulSetSpec {
        StatefulSetSpec {
            name: name.into(),
            kind,
            replicas,
            requests: ResourceUsage::new(1000, 512),
            placement: Placement {
                node_role: role,
                anti_affinity: anti,
            },
        }
    }

    fn pod(s: &StatefulSetSpec, ordinal: u32, phase: Phase) -> PodInstance {
        let mut p = PodInstance::new(&s.name, s.kind, ordinal, s.requests);
        p.phase = phase;
        p
    }

    fn testbed() -> Cluster {
        let node = |name: &str, role, idx| NodeSpec {
            name: name.into(),
            role,
            cpu_capacity: 4000,
            mem_capacity: 8192,
            pod_cidr: default_pod_cidr(idx),
        };
        Cluster::new(vec![
            node("master", NodeRole::Master, 0),
            node("worker-1", NodeRole::Worker, 1),
            node("worker-2", NodeRole::Worker, 2),
        ])
        .unwrap()
    }

    #[test]
    fn ordered_creation() {
        let rrh = set("rrh", PodKind::Rrh, 2, RoleSelector::Worker, true);
        assert_eq!(
            reconcile(&rrh, &[]).unwrap(),
            [SetAction::Create {
                name: "rrh-0".into(),
                ordinal: 0
            }]
        );
        let p0 = pod(&rrh, 0, Phase::Starting);
        assert!(reconcile(&rrh, &[&p0]).unwrap().is_empty());
        let p0 = pod(&rrh, 0, Phase::Running);
        assert_eq!(
            reconcile(&rrh, &[&p0]).unwrap(),
            [SetAction::Create {
                name: "rrh-1".into(),
                ordinal: 1
            }]
        );
    }

    #[test]
    fn reverse_order_scale_down() {
        let rrh = set("rrh", PodKind::Rrh, 1, RoleSelector::Worker, true);
        let p0 = pod(&rrh, 0, Phase::Running);
        let p1 = pod(&rrh, 1, Phase::Running);
        assert_eq!(
            reconcile(&rrh, &[&p0, &p1]).unwrap(),
            [SetAction::Delete {
                name: "rrh-1".into()
            }]
        );

        let zero = StatefulSetSpec {
            replicas: 0,
            ..rrh.clone()
        };
        let p2 = pod(&rrh, 2, Phase::Pending);
        let names: Vec<_> = reconcile(&zero, &[&p0, &p2, &p1])
            .unwrap()
            .iter()
            .map(|a| a.to_string())
            .collect();
        assert_eq!(names, ["DELETE rrh-2", "DELETE rrh-1", "DELETE rrh-0"]);

        // already terminating pods are not deleted twice
        let t1 = pod(&rrh, 1, Phase::Terminating);
        assert!(reconcile(&rrh, &[&p0, &t1]).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ordinal_is_fatal() {
        let rrh = set("rrh", PodKind::Rrh, 2, RoleSelector::Worker, true);
        let a = pod(&rrh, 0, Phase::Running);
        let b = pod(&rrh, 0, Phase::Pending);
        assert!(matches!(
            reconcile(&rrh, &[&a, &b]),
            Err(OrchestratorError::DuplicateOrdinal { ordinal: 0, .. })
        ));
        let bbu = set("bbu", PodKind::Bbu, 1, RoleSelector::Master, false);
        let foreign = pod(&bbu, 0, Phase::Running);
        assert!(matches!(
            reconcile(&rrh, &[&foreign]),
            Err(OrchestratorError::ForeignPod { .. })
        ));
    }

    /// Drives reconcile with a toy lifecycle (create -> running after a
    /// random delay, delete -> gone after a random delay) and checks every
    /// pass against a set-based model.
    #[test]
    fn random_scale_sequences_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let mut spec = set("rrh", PodKind::Rrh, 0, RoleSelector::Any, false);
            let mut pods: BTreeMap<u32, PodInstance> = BTreeMap::new();
            for _ in 0..200 {
                if rng.gen_bool(0.1) {
                    spec.replicas = rng.gen_range(0..=5);
                }
                let live: Vec<&PodInstance> = pods.values().collect();
                let actions = reconcile(&spec, &live).unwrap();
                let creates = actions
                    .iter()
                    .filter(|a| matches!(a, SetAction::Create { .. }))
                    .count();
                assert!(creates <= 1);
                let mut last_deleted = u32::MAX;
                for a in actions {
                    match a {
                        SetAction::Create { ordinal, .. } => {
                            assert!(ordinal < spec.replicas);
                            assert!((0..ordinal)
                                .all(|o| pods.get(&o).map(|p| p.phase) == Some(Phase::Running)));
                            assert!(pods
                                .insert(ordinal, pod(&spec, ordinal, Phase::Pending))
                                .is_none());
                        }
                        SetAction::Delete { name } => {
                            let o: u32 = name.rsplit('-').next().unwrap().parse().unwrap();
                            assert!(o >= spec.replicas && o < last_deleted);
                            last_deleted = o;
                            pods.get_mut(&o).unwrap().phase = Phase::Terminating;
                        }
                    }
                }
                // toy lifecycle progress
                for p in pods.values_mut() {
                    if rng.gen_bool(0.5) {
                        p.phase = match p.phase {
                            Phase::Terminating => Phase::Gone,
                            Phase::Running | Phase::Gone => p.phase,
                            _ => Phase::Running,
                        };
                    }
                }
                pods.retain(|_, p| p.phase != Phase::Gone);
            }
            // quiesce
            for _ in 0..50 {
                let live: Vec<&PodInstance> = pods.values().collect();
                for a in reconcile(&spec, &live).unwrap() {
                    match a {
                        SetAction::Create { ordinal, .. } => {
                            pods.insert(ordinal, pod(&spec, ordinal, Phase::Running));
                        }
                        SetAction::Delete { name } => {
                            let o: u32 = name.rsplit('-').next().unwrap().parse().unwrap();
                            pods.get_mut(&o).unwrap().phase = Phase::Terminating;
                        }
                    }
                }
                for p in pods.values_mut() {
                    p.phase = match p.phase {
                        Phase::Terminating => Phase::Gone,
                        _ => Phase::Running,
                    };
                }
                pods.retain(|_, p| p.phase != Phase::Gone);
            }
            let ordinals: BTreeSet<u32> = pods.keys().copied().collect();
            assert_eq!(ordinals, (0..spec.replicas).collect());
        }
    }

    #[test]
    fn pairing_is_identity_on_ordinals() {
        assert_eq!(pair(0), "rrh-0");
        assert_eq!(pair(3), "rrh-3");
        assert_eq!(pair_in("radio", 2), "radio-2");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(0..20);
            let matched: BTreeSet<String> = (0..n).map(pair).collect();
            assert_eq!(matched.len(), n as usize);
            let rrhs: BTreeSet<String> = (0..n).map(|o| pod_name("rrh", o)).collect();
            assert_eq!(matched, rrhs);
        }
    }

    fn place(cluster: &mut Cluster, p: &mut PodInstance, node: &str) {
        assert_eq!(cluster.commit(p.requests, node).unwrap(), Admission::Accept);
        p.ip = Some(cluster.allocate_ip(node).unwrap());
        p.node = Some(node.into());
        p.phase = Phase::Scheduled;
    }

    #[test]
    fn testbed_rrh_placement() {
        let mut cl = testbed();
        let rrh = set("rrh", PodKind::Rrh, 3, RoleSelector::Worker, true);
        let mut placed: Vec<PodInstance> = Vec::new();
        let mut results = Vec::new();
        for o in 0..3 {
            let mut p = pod(&rrh, o, Phase::Pending);
            let r = schedule(&p, &rrh.placement, &cl, placed.iter());
            if let Ok(node) = &r {
                place(&mut cl, &mut p, node);
            }
            results.push(r);
            placed.push(p);
        }
        assert_eq!(results[0].as_deref(), Ok("worker-1"));
        assert_eq!(results[1].as_deref(), Ok("worker-2"));
        assert_eq!(results[2].as_deref(), Err(&NO_FEASIBLE_NODE.to_string()));
    }

    #[test]
    fn testbed_bbu_placement() {
        let mut cl = testbed();
        let bbu = set("bbu", PodKind::Bbu, 2, RoleSelector::Master, false);
        let mut placed = Vec::new();
        for o in 0..2 {
            let mut p = pod(&bbu, o, Phase::Pending);
            let node = schedule(&p, &bbu.placement, &cl, placed.iter()).unwrap();
            assert_eq!(node, "master");
            place(&mut cl, &mut p, &node);
            placed.push(p);
        }
    }

    #[test]
    fn tie_break_prefers_least_loaded_then_name() {
        let mut cl = testbed();
        let any = set("x", PodKind::Rrh, 3, RoleSelector::Worker, false);
        let mut first = pod(&any, 0, Phase::Pending);
        assert_eq!(
            schedule(&first, &any.placement, &cl, std::iter::empty()).unwrap(),
            "worker-1"
        );
        place(&mut cl, &mut first, "worker-1");
        let second = pod(&any, 1, Phase::Pending);
        assert_eq!(
            schedule(&second, &any.placement, &cl, [&first]).unwrap(),
            "worker-2"
        );
    }

    #[test]
    fn batch_placement_backtracks_past_greedy() {
        let node = |name: &str, role, idx| NodeSpec {
            name: name.into(),
            role,
            cpu_capacity: 2000,
            mem_capacity: 8192,
            pod_cidr: default_pod_cidr(idx),
        };
        let cl = Cluster::new(vec![
            node("a", NodeRole::Master, 0),
            node("b", NodeRole::Worker, 1),
        ])
        .unwrap();
        let small = set("s", PodKind::Rrh, 2, RoleSelector::Any, false);
        let mut big = set("b", PodKind::Rrh, 1, RoleSelector::Any, false);
        big.requests = ResourceUsage::new(2000, 512);
        let pods = [
            pod(&small, 0, Phase::Pending),
            pod(&small, 1, Phase::Pending),
            pod(&big, 0, Phase::Pending),
        ];
        let batch: Vec<_> = pods
            .iter()
            .zip([&small, &small, &big])
            .map(|(p, s)| (p, &s.placement))
            .collect();
        // greedy spreads the small pods and strands the big one
        assert_eq!(
            place_batch(&batch, &cl, pods.iter()),
            [Some("a".into()), Some("a".into()), Some("b".into())]
        );
        // a single pod gets exactly the greedy choice
        assert_eq!(
            place_batch(&batch[..1], &cl, pods.iter()),
            [Some(
                schedule(&pods[0], &small.placement, &cl, pods.iter()).unwrap()
            )]
        );
    }

    #[test]
    fn batch_placement_prefers_earlier_pods_when_short() {
        let cl = testbed();
        let rrh = set("rrh", PodKind::Rrh, 3, RoleSelector::Worker, true);
        let pods: Vec<_> = (0..3).map(|i| pod(&rrh, i, Phase::Pending)).collect();
        let batch: Vec<_> = pods.iter().map(|p| (p, &rrh.placement)).collect();
        assert_eq!(
            place_batch(&batch, &cl, pods.iter()),
            [Some("worker-1".into()), Some("worker-2".into()), None]
        );
    }

    fn running_rrh(registry: &mut Registry, name_ord: u32, mode: UeMode) -> PodInstance {
        let rrh = set("rrh", PodKind::Rrh, 1, RoleSelector::Worker, true);
        let mut p = pod(&rrh, name_ord, Phase::Starting);
        p.node = Some("worker-1".into());
        p.ip = Some(Ipv4Addr::new(10, 244, 1, 2));
        start_rrh(&mut p, registry, mode).unwrap();
        start_rrh(&mut p, registry, mode).unwrap();
        p
    }

    #[test]
    fn rrh_publishes_record() {
        let mut reg = Registry::new();
        let p = running_rrh(&mut reg, 0, UeMode::Oaisim);
        assert_eq!(p.phase, Phase::Running);
        assert_eq!(reg.get("pods/rrh-0/ip").unwrap(), Some(&b"10.244.1.2"[..]));
        assert!(reg.get("pods/rrh-0/sim").unwrap().is_some());

        let mut reg = Registry::new();
        running_rrh(&mut reg, 0, UeMode::RealUe);
        assert!(reg.get("pods/rrh-0/ip").unwrap().is_some());
        assert_eq!(reg.get("pods/rrh-0/sim").unwrap(), None);
    }

    #[test]
    fn rrh_start_rejects_wrong_phase() {
        let mut reg = Registry::new();
        let rrh = set("rrh", PodKind::Rrh, 1, RoleSelector::Worker, true);
        let mut p = pod(&rrh, 0, Phase::Pending);
        assert!(matches!(
            start_rrh(&mut p, &mut reg, UeMode::Oaisim),
            Err(OrchestratorError::WrongPhase { .. })
        ));
    }

    fn discovering_bbu(reg: &mut Registry) -> PodInstance {
        let bbu = set("bbu", PodKind::Bbu, 1, RoleSelector::Master, false);
        let mut p = pod(&bbu, 0, Phase::Starting);
        p.node = Some("master".into());
        p.ip = Some(Ipv4Addr::new(10, 244, 0, 2));
        p.peer = Some(pair(0));
        let t = start_bbu(&mut p, reg, 0, &DiscoveryPolicy::default())
            .unwrap()
            .unwrap();
        assert_eq!((t.from, t.to), (Phase::Starting, Phase::Discovering));
        p
    }

    #[test]
    fn bbu_happy_path() {
        let mut reg = Registry::new();
        running_rrh(&mut reg, 0, UeMode::Oaisim);
        let mut p = discovering_bbu(&mut reg);
        let t = start_bbu(&mut p, &mut reg, 1000, &DiscoveryPolicy::default())
            .unwrap()
            .unwrap();
        assert_eq!(t.to, Phase::Running);
        assert_eq!(p.peer_ip, Some(Ipv4Addr::new(10, 244, 1, 2)));
        assert_eq!(reg.get("pods/bbu-0/ip").unwrap(), Some(&b"10.244.0.2"[..]));
    }

    #[test]
    fn bbu_waits_for_late_rrh() {
        let mut reg = Registry::new();
        let policy = DiscoveryPolicy::default();
        let mut p = discovering_bbu(&mut reg);
        for tick in 1..=3u64 {
            assert_eq!(
                start_bbu(&mut p, &mut reg, tick * 1000, &policy).unwrap(),
                None
            );
            assert_eq!(p.phase, Phase::Discovering);
        }
        // the RRH registers during tick 4, after the BBU's attempt
        assert_eq!(start_bbu(&mut p, &mut reg, 4000, &policy).unwrap(), None);
        running_rrh(&mut reg, 0, UeMode::RealUe);
        let t = start_bbu(&mut p, &mut reg, 5000, &policy).unwrap().unwrap();
        assert_eq!(t.to, Phase::Running);
        assert_eq!(p.discovery_attempts, 5);
    }

    #[test]
    fn retry_interval_is_respected() {
        let mut reg = Registry::new();
        let policy = DiscoveryPolicy {
            retry_interval_ms: 3000,
            max_retries: None,
        };
        let mut p = discovering_bbu(&mut reg);
        assert_eq!(start_bbu(&mut p, &mut reg, 1000, &policy).unwrap(), None);
        running_rrh(&mut reg, 0, UeMode::RealUe);
        assert_eq!(start_bbu(&mut p, &mut reg, 2000, &policy).unwrap(), None);
        assert_eq!(start_bbu(&mut p, &mut reg, 3000, &policy).unwrap(), None);
        assert!(start_bbu(&mut p, &mut reg, 4000, &policy)
            .unwrap()
            .is_some());
    }

    #[test]
    fn retry_budget_exhaustion_flags_pod() {
        let mut reg = Registry::new();
        let policy = DiscoveryPolicy {
            retry_interval_ms: 1000,
            max_retries: Some(2),
        };
        let mut p = discovering_bbu(&mut reg);
        start_bbu(&mut p, &mut reg, 1000, &policy).unwrap();
        assert_eq!(p.diagnostic, None);
        start_bbu(&mut p, &mut reg, 2000, &policy).unwrap();
        assert_eq!(p.diagnostic.as_deref(), Some(FAILED_DISCOVERY));
        running_rrh(&mut reg, 0, UeMode::RealUe);
        assert_eq!(start_bbu(&mut p, &mut reg, 3000, &policy).unwrap(), None);
        assert_eq!(p.phase, Phase::Discovering);
    }

    #[test]
    fn terminate_cleans_up_and_is_idempotent() {
        let mut reg = Registry::new();
        let mut cl = testbed();
        let rrh = set("rrh", PodKind::Rrh, 1, RoleSelector::Worker, true);
        let mut p = pod(&rrh, 0, Phase::Pending);
        place(&mut cl, &mut p, "worker-1");
        start_container(&mut p).unwrap();
        start_rrh(&mut p, &mut reg, UeMode::Oaisim).unwrap();
        start_rrh(&mut p, &mut reg, UeMode::Oaisim).unwrap();
        assert_eq!(reg.len(), 2);

        let t = terminate_pod(&mut p, &mut reg, &mut cl, "scale down")
            .unwrap()
            .unwrap();
        assert_eq!((t.from, t.to), (Phase::Running, Phase::Terminating));
        assert!(reg.is_empty());
        assert_eq!(cl.committed("worker-1").unwrap(), ResourceUsage::ZERO);
        assert_eq!(cl.allocated_ips("worker-1").unwrap().count(), 0);
        assert_eq!(
            terminate_pod(&mut p, &mut reg, &mut cl, "again").unwrap(),
            None
        );
        assert_eq!(finish_termination(&mut p).unwrap().unwrap().to, Phase::Gone);
        assert_eq!(finish_termination(&mut p).unwrap(), None);
        assert_eq!(
            terminate_pod(&mut p, &mut reg, &mut cl, "again").unwrap(),
            None
        );
    }

    #[test]
    fn discovery_record_keys() {
        let r = DiscoveryRecord::new("rrh-0", UeMode::Oaisim);
        assert_eq!(r.ip_key, "pods/rrh-0/ip");
        assert_eq!(r.sim_key.as_deref(), Some("pods/rrh-0/sim"));
        assert_eq!(DiscoveryRecord::new("rrh-0", UeMode::RealUe).sim_key, None);
    }
}
