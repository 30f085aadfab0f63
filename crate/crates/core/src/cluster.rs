//! Machine cluster model: node roles and capacities, per-node pod CIDR
//! address management, and per-node virtual routing.
//!
//! Address `.1` (network + 1) of every pod CIDR belongs to the node's virtual
//! router. Pod addresses are handed out lowest-free-first from network + 2 up
//! to broadcast - 1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("invalid CIDR {0:?}")]
    InvalidCidr(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("node {0:?}: pod CIDR exhausted")]
    CidrExhausted(String),
    #[error("node {node:?}: address {ip} is not allocated")]
    NotAllocated { node: String, ip: Ipv4Addr },
    #[error("address {0} is not allocated on any node")]
    UnknownAddress(Ipv4Addr),
    #[error("exactly one MASTER required, found {0}")]
    MasterCount(usize),
    #[error("duplicate node name {0:?}")]
    DuplicateNode(String),
    #[error("node {0:?}: cpu and memory capacity must be positive")]
    ZeroCapacity(String),
    #[error("pod CIDRs of {0:?} and {1:?} overlap")]
    OverlappingCidr(String, String),
    #[error("node {node:?}: releasing more resources than committed")]
    CommitUnderflow { node: String },
}

/// An IPv4 network block, stored normalized (host bits cleared).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ipv4Cidr {
    network: u32,
    prefix: u8,
}

impl Ipv4Cidr {
    pub fn new(addr: Ipv4Addr, prefix: u8) -> Result<Self, ClusterError> {
        if prefix > 32 {
            return Err(ClusterError::InvalidCidr(format!("{addr}/{prefix}")));
        }
        let raw = u32::from(addr);
        let network = raw & Self::mask_for(prefix);
        if network != raw {
            return Err(ClusterError::InvalidCidr(format!("{addr}/{prefix}")));
        }
        Ok(Self { network, prefix })
    }

    fn mask_for(prefix: u8) -> u32 {
        if prefix == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(prefix))
        }
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix
    }

    pub fn network(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.network)
    }

    pub fn broadcast(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.network | !Self::mask_for(self.prefix))
    }

    /// The node's virtual router address (network + 1).
    pub fn router(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.network.wrapping_add(1))
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask_for(self.prefix) == self.network
    }

    pub fn overlaps(&self, other: &Ipv4Cidr) -> bool {
        self.contains(other.network()) || other.contains(self.network())
    }

    /// Addresses usable by pods: everything except network, router and
    /// broadcast. Empty for /31 and /32.
    pub fn pod_range(&self) -> std::ops::RangeInclusive<u32> {
        let last = u32::from(self.broadcast());
        if self.prefix >= 31 {
            #[allow(clippy::reversed_empty_ranges)]
            return 1..=0;
        }
        (self.network + 2)..=(last - 1)
    }
}

impl fmt::Display for Ipv4Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network(), self.prefix)
    }
}

impl FromStr for Ipv4Cidr {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ClusterError::InvalidCidr(s.to_owned());
        let (addr, prefix) = s.split_once('/').ok_or_else(bad)?;
        let addr: Ipv4Addr = addr.parse().map_err(|_| bad())?;
        let prefix: u8 = prefix.parse().map_err(|_| bad())?;
        Self::new(addr, prefix).map_err(|_| bad())
    }
}

impl Serialize for Ipv4Cidr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ipv4Cidr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeRole {
    Master,
    Worker,
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeRole::Master => "MASTER",
            NodeRole::Worker => "WORKER",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub role: NodeRole,
    /// Millicores; 4000 is four cores.
    pub cpu_capacity: u64,
    /// MiB.
    pub mem_capacity: u64,
    pub pod_cidr: Ipv4Cidr,
}

/// CPU in millicores and memory in MiB. Used both for reservations
/// (requests) and for metered consumption.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub cpu: u64,
    pub mem: u64,
}

impl ResourceUsage {
    pub const ZERO: ResourceUsage = ResourceUsage { cpu: 0, mem: 0 };

    pub fn new(cpu: u64, mem: u64) -> Self {
        Self { cpu, mem }
    }
}

impl std::ops::Add for ResourceUsage {
    type Output = ResourceUsage;

    fn add(self, rhs: Self) -> Self {
        ResourceUsage::new(self.cpu + rhs.cpu, self.mem + rhs.mem)
    }
}

impl std::ops::AddAssign for ResourceUsage {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for ResourceUsage {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ResourceUsage::ZERO, |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteEntry {
    pub dst_cidr: Ipv4Cidr,
    pub via_node: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Accept,
    Reject,
}

/// Pure capacity check: would `request` fit on top of `committed`?
pub fn admit(request: ResourceUsage, committed: ResourceUsage, node: &NodeSpec) -> Admission {
    let fits = |used: u64, req: u64, cap: u64| used.checked_add(req).is_some_and(|t| t <= cap);
    if fits(committed.cpu, request.cpu, node.cpu_capacity)
        && fits(committed.mem, request.mem, node.mem_capacity)
    {
        Admission::Accept
    } else {
        Admission::Reject
    }
}

#[derive(Debug, Clone)]
struct NodeState {
    spec: NodeSpec,
    allocated: BTreeSet<Ipv4Addr>,
    committed: ResourceUsage,
}

/// Live cluster state: nodes plus their address and reservation books.
#[derive(Debug, Clone)]
pub struct Cluster {
    nodes: BTreeMap<String, NodeState>,
}

impl Cluster {
    /// Builds a cluster after checking the node-level invariants.
    pub fn new(specs: Vec<NodeSpec>) -> Result<Self, ClusterError> {
        let masters = specs.iter().filter(|n| n.role == NodeRole::Master).count();
        if masters != 1 {
            return Err(ClusterError::MasterCount(masters));
        }
        for (i, a) in specs.iter().enumerate() {
            if a.cpu_capacity == 0 || a.mem_capacity == 0 {
                return Err(ClusterError::ZeroCapacity(a.name.clone()));
            }
            for b in &specs[i + 1..] {
                if a.name == b.name {
                    return Err(ClusterError::DuplicateNode(a.name.clone()));
                }
                if a.pod_cidr.overlaps(&b.pod_cidr) {
                    return Err(ClusterError::OverlappingCidr(
                        a.name.clone(),
                        b.name.clone(),
                    ));
                }
            }
        }
        let nodes = specs
            .into_iter()
            .map(|spec| {
                let state = NodeState {
                    spec,
                    allocated: BTreeSet::new(),
                    committed: ResourceUsage::ZERO,
                };
                (state.spec.name.clone(), state)
            })
            .collect();
        Ok(Self { nodes })
    }

    /// Nodes in name order.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values().map(|n| &n.spec)
    }

    pub fn node(&self, name: &str) -> Result<&NodeSpec, ClusterError> {
        self.state(name).map(|n| &n.spec)
    }

    pub fn master(&self) -> &NodeSpec {
        self.nodes()
            .find(|n| n.role == NodeRole::Master)
            .expect("cluster invariant: exactly one master")
    }

    pub fn worker_count(&self) -> usize {
        self.nodes().filter(|n| n.role == NodeRole::Worker).count()
    }

    fn state(&self, name: &str) -> Result<&NodeState, ClusterError> {
        self.nodes
            .get(name)
            .ok_or_else(|| ClusterError::UnknownNode(name.to_owned()))
    }

    fn state_mut(&mut self, name: &str) -> Result<&mut NodeState, ClusterError> {
        self.nodes
            .get_mut(name)
            .ok_or_else(|| ClusterError::UnknownNode(name.to_owned()))
    }

    /// Lowest free pod address on `node`.
    pub fn allocate_ip(&mut self, node: &str) -> Result<Ipv4Addr, ClusterError> {
        let state = self.state_mut(node)?;
        let ip = state
            .spec
            .pod_cidr
            .pod_range()
            .map(Ipv4Addr::from)
            .find(|ip| !state.allocated.contains(ip))
            .ok_or_else(|| ClusterError::CidrExhausted(node.to_owned()))?;
        state.allocated.insert(ip);
        Ok(ip)
    }

    pub fn has_free_ip(&self, node: &str) -> Result<bool, ClusterError> {
        let state = self.state(node)?;
        let usable = state.spec.pod_cidr.pod_range().count();
        Ok(state.allocated.len() < usable)
    }

    pub fn release_ip(&mut self, node: &str, ip: Ipv4Addr) -> Result<(), ClusterError> {
        let state = self.state_mut(node)?;
        if !state.allocated.remove(&ip) {
            return Err(ClusterError::NotAllocated {
                node: node.to_owned(),
                ip,
            });
        }
        Ok(())
    }

    pub fn allocated_ips(
        &self,
        node: &str,
    ) -> Result<impl Iterator<Item = Ipv4Addr> + '_, ClusterError> {
        Ok(self.state(node)?.allocated.iter().copied())
    }

    /// Node holding the allocation for `ip`.
    pub fn node_of_ip(&self, ip: Ipv4Addr) -> Option<&NodeSpec> {
        self.nodes
            .values()
            .find(|n| n.allocated.contains(&ip))
            .map(|n| &n.spec)
    }

    /// Virtual-router hops between two allocated pod addresses.
    pub fn route(&self, src: Ipv4Addr, dst: Ipv4Addr) -> Result<Vec<String>, ClusterError> {
        let from = self
            .node_of_ip(src)
            .ok_or(ClusterError::UnknownAddress(src))?;
        let to = self
            .node_of_ip(dst)
            .ok_or(ClusterError::UnknownAddress(dst))?;
        if from.name == to.name {
            Ok(vec![from.name.clone()])
        } else {
            Ok(vec![from.name.clone(), to.name.clone()])
        }
    }

    /// Route table of `node`: one entry per peer's pod CIDR.
    pub fn routes(&self, node: &str) -> Result<Vec<RouteEntry>, ClusterError> {
        self.state(node)?;
        Ok(self
            .nodes()
            .filter(|n| n.name != node)
            .map(|n| RouteEntry {
                dst_cidr: n.pod_cidr,
                via_node: n.name.clone(),
            })
            .collect())
    }

    pub fn committed(&self, node: &str) -> Result<ResourceUsage, ClusterError> {
        Ok(self.state(node)?.committed)
    }

    pub fn admit(&self, request: ResourceUsage, node: &str) -> Result<Admission, ClusterError> {
        let state = self.state(node)?;
        Ok(admit(request, state.committed, &state.spec))
    }

    /// Reserves `request` on `node` if it fits.
    pub fn commit(
        &mut self,
        request: ResourceUsage,
        node: &str,
    ) -> Result<Admission, ClusterError> {
        let state = self.state_mut(node)?;
        let decision = admit(request, state.committed, &state.spec);
        if decision == Admission::Accept {
            state.committed += request;
        }
        Ok(decision)
    }

    pub fn uncommit(&mut self, request: ResourceUsage, node: &str) -> Result<(), ClusterError> {
        let state = self.state_mut(node)?;
        let cpu = state.committed.cpu.checked_sub(request.cpu);
        let mem = state.committed.mem.checked_sub(request.mem);
        match (cpu, mem) {
            (Some(cpu), Some(mem)) => {
                state.committed = ResourceUsage::new(cpu, mem);
                Ok(())
            }
            _ => Err(ClusterError::CommitUnderflow {
                node: node.to_owned(),
            }),
        }
    }
}

/// The `index`-th /24 block of 10.244.0.0/16.
pub fn default_pod_cidr(index: u8) -> Ipv4Cidr {
    Ipv4Cidr::new(Ipv4Addr::new(10, 244, index, 0), 24).expect("aligned /24")
}

#[cfg(test)]
mod tests {
    use std::collections::{HashMap, VecDeque};

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn node(name: &str, role: NodeRole, idx: u8) -> NodeSpec {
        NodeSpec {
            name: name.into(),
            role,
            cpu_capacity: 4000,
            mem_capacity: 8192,
            pod_cidr: default_pod_cidr(idx),
        }
    }

    fn testbed() -> Cluster {
        Cluster::new(vec![
            node("master", NodeRole::Master, 0),
            node("worker-1", NodeRole::Worker, 1),
            node("worker-2", NodeRole::Worker, 2),
        ])
        .unwrap()
    }

    #[test]
    fn cidr_parse_and_bounds() {
        let c: Ipv4Cidr = "10.244.1.0/24".parse().unwrap();
        assert_eq!(c.router(), Ipv4Addr::new(10, 244, 1, 1));
        assert_eq!(c.broadcast(), Ipv4Addr::new(10, 244, 1, 255));
        assert_eq!(c.pod_range().count(), 253);
        assert!("10.244.1.5/24".parse::<Ipv4Cidr>().is_err());
        assert!("10.244.1.0/33".parse::<Ipv4Cidr>().is_err());
        assert!("nonsense".parse::<Ipv4Cidr>().is_err());
        assert_eq!(
            "10.0.0.0/31"
                .parse::<Ipv4Cidr>()
                .unwrap()
                .pod_range()
                .count(),
            0
        );
    }

    #[test]
    fn first_allocation_skips_router() {
        let mut cl = testbed();
        assert_eq!(
            cl.allocate_ip("worker-1").unwrap(),
            Ipv4Addr::new(10, 244, 1, 2)
        );
        assert_eq!(
            cl.allocate_ip("worker-1").unwrap(),
            Ipv4Addr::new(10, 244, 1, 3)
        );
    }

    #[test]
    fn slash30_exhausts_after_one() {
        let mut n = node("master", NodeRole::Master, 0);
        n.pod_cidr = "10.1.0.0/30".parse().unwrap();
        let mut cl = Cluster::new(vec![n]).unwrap();
        assert_eq!(
            cl.allocate_ip("master").unwrap(),
            Ipv4Addr::new(10, 1, 0, 2)
        );
        assert_eq!(
            cl.allocate_ip("master"),
            Err(ClusterError::CidrExhausted("master".into()))
        );
        assert!(!cl.has_free_ip("master").unwrap());
    }

    #[test]
    fn release_unallocated_is_error() {
        let mut cl = testbed();
        let ip = Ipv4Addr::new(10, 244, 1, 2);
        assert!(matches!(
            cl.release_ip("worker-1", ip),
            Err(ClusterError::NotAllocated { .. })
        ));
        cl.allocate_ip("worker-1").unwrap();
        cl.release_ip("worker-1", ip).unwrap();
        assert!(cl.release_ip("worker-1", ip).is_err());
        // freed address is reused lowest-first
        assert_eq!(cl.allocate_ip("worker-1").unwrap(), ip);
    }

    #[test]
    fn interleaved_allocations_stay_unique_and_confined() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cl = testbed();
        let cidr = cl.node("worker-1").unwrap().pod_cidr;
        let mut held: VecDeque<Ipv4Addr> = VecDeque::new();
        let mut log = Vec::new();
        for _ in 0..200 {
            if held.is_empty() || rng.gen_bool(0.6) {
                let ip = cl.allocate_ip("worker-1").unwrap();
                log.push((true, ip));
                held.push_back(ip);
            } else {
                let idx = rng.gen_range(0..held.len());
                let ip = held.remove(idx).unwrap();
                cl.release_ip("worker-1", ip).unwrap();
                log.push((false, ip));
            }
        }
        // replay the log against a plain set
        let mut live = BTreeSet::new();
        for (alloc, ip) in log {
            assert!(cidr.contains(ip));
            assert_ne!(ip, cidr.network());
            assert_ne!(ip, cidr.router());
            assert_ne!(ip, cidr.broadcast());
            if alloc {
                assert!(live.insert(ip), "{ip} handed out twice");
            } else {
                assert!(live.remove(&ip));
            }
        }
    }

    #[test]
    fn cluster_validation() {
        assert_eq!(
            Cluster::new(vec![]).unwrap_err(),
            ClusterError::MasterCount(0)
        );
        let err = Cluster::new(vec![
            node("a", NodeRole::Master, 0),
            node("b", NodeRole::Worker, 0),
        ])
        .unwrap_err();
        assert_eq!(err, ClusterError::OverlappingCidr("a".into(), "b".into()));
        let mut z = node("a", NodeRole::Master, 0);
        z.cpu_capacity = 0;
        assert!(matches!(
            Cluster::new(vec![z]),
            Err(ClusterError::ZeroCapacity(_))
        ));
    }

    #[test]
    fn routes_cover_every_peer() {
        let cl = testbed();
        for n in cl.nodes() {
            let routes = cl.routes(&n.name).unwrap();
            assert_eq!(routes.len(), 2);
            for peer in cl.nodes().filter(|p| p.name != n.name) {
                assert!(routes
                    .iter()
                    .any(|r| r.via_node == peer.name && r.dst_cidr == peer.pod_cidr));
            }
        }
    }

    #[test]
    fn route_same_and_cross_node() {
        let mut cl = testbed();
        let bbu = cl.allocate_ip("master").unwrap();
        let rrh = cl.allocate_ip("worker-1").unwrap();
        let rrh2 = cl.allocate_ip("worker-1").unwrap();
        assert_eq!(bbu, Ipv4Addr::new(10, 244, 0, 2));
        assert_eq!(rrh, Ipv4Addr::new(10, 244, 1, 2));
        assert_eq!(cl.route(bbu, rrh).unwrap(), ["master", "worker-1"]);
        assert_eq!(cl.route(rrh, rrh2).unwrap(), ["worker-1"]);
        assert!(cl.route(bbu, Ipv4Addr::new(10, 244, 2, 9)).is_err());
    }

    /// Breadth-first search over the star graph: each pod hangs off its
    /// node's virtual router, routers are fully meshed.
    fn bfs_router_path(cl: &Cluster, src: Ipv4Addr, dst: Ipv4Addr) -> Vec<String> {
        #[derive(Clone, PartialEq, Eq, Hash, Debug)]
        enum V {
            Pod(Ipv4Addr),
            Router(String),
        }
        let mut adj: HashMap<V, Vec<V>> = HashMap::new();
        for n in cl.nodes() {
            let r = V::Router(n.name.clone());
            for ip in cl.allocated_ips(&n.name).unwrap() {
                adj.entry(r.clone()).or_default().push(V::Pod(ip));
                adj.entry(V::Pod(ip)).or_default().push(r.clone());
            }
            for m in cl.nodes().filter(|m| m.name != n.name) {
                adj.entry(r.clone())
                    .or_default()
                    .push(V::Router(m.name.clone()));
            }
        }
        let mut prev: HashMap<V, V> = HashMap::new();
        let mut queue = VecDeque::from([V::Pod(src)]);
        let mut seen = std::collections::HashSet::from([V::Pod(src)]);
        while let Some(v) = queue.pop_front() {
            if v == V::Pod(dst) {
                break;
            }
            for w in adj.get(&v).cloned().unwrap_or_default() {
                if seen.insert(w.clone()) {
                    prev.insert(w.clone(), v.clone());
                    queue.push_back(w);
                }
            }
        }
        let mut path = Vec::new();
        let mut cur = V::Pod(dst);
        while let Some(p) = prev.get(&cur) {
            if let V::Router(name) = p {
                path.push(name.clone());
            }
            cur = p.clone();
        }
        path.reverse();
        path
    }

    #[test]
    fn all_pairs_routes_match_bfs() {
        let mut cl = testbed();
        let mut ips = Vec::new();
        for n in ["master", "master", "worker-1", "worker-2", "worker-2"] {
            ips.push(cl.allocate_ip(n).unwrap());
        }
        for &a in &ips {
            for &b in &ips {
                if a == b {
                    continue;
                }
                let path = cl.route(a, b).unwrap();
                assert_eq!(path, bfs_router_path(&cl, a, b), "{a} -> {b}");
                let mut back = cl.route(b, a).unwrap();
                back.reverse();
                assert_eq!(path, back);
            }
        }
    }

    #[test]
    fn admission_examples() {
        let n = node("m", NodeRole::Master, 0);
        assert_eq!(
            admit(ResourceUsage::new(1000, 1024), ResourceUsage::ZERO, &n),
            Admission::Accept
        );
        assert_eq!(
            admit(ResourceUsage::new(1000, 0), ResourceUsage::new(3500, 0), &n),
            Admission::Reject
        );
        assert_eq!(
            admit(ResourceUsage::new(500, 0), ResourceUsage::new(3500, 0), &n),
            Admission::Accept
        );
        assert_eq!(
            admit(ResourceUsage::new(0, 1), ResourceUsage::new(0, 8192), &n),
            Admission::Reject
        );
    }

    #[test]
    fn admission_matches_running_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cl = testbed();
        let mut accepted: Vec<ResourceUsage> = Vec::new();
        for _ in 0..300 {
            if !accepted.is_empty() && rng.gen_bool(0.3) {
                let r = accepted.swap_remove(rng.gen_range(0..accepted.len()));
                cl.uncommit(r, "master").unwrap();
                continue;
            }
            let req = ResourceUsage::new(rng.gen_range(0..1500), rng.gen_range(0..3000));
            let sum: ResourceUsage = accepted.iter().copied().sum();
            let expect = sum.cpu + req.cpu <= 4000 && sum.mem + req.mem <= 8192;
            let got = cl.commit(req, "master").unwrap() == Admission::Accept;
            assert_eq!(got, expect);
            if got {
                accepted.push(req);
            }
            let c = cl.committed("master").unwrap();
            assert!(c.cpu <= 4000 && c.mem <= 8192);
        }
        assert!(cl
            .uncommit(ResourceUsage::new(1_000_000, 0), "master")
            .is_err());
    }
}
