//! Substrate graph: nodes with roles, links, and static shortest-path routing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::srv6::Sid;

use super::link::Link;
use super::NetError;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Client,
    SrSource,
    Transit,
    SrEndpoint,
    Nsf,
    Server,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Client => "client",
            Role::SrSource => "sr_source",
            Role::Transit => "transit",
            Role::SrEndpoint => "sr_endpoint",
            Role::Nsf => "nsf",
            Role::Server => "server",
        }
    }
}

/// Relative node capacities. `compute_rate` scales the shared base FLOP
/// rate; memory and storage are carried for config completeness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resources {
    pub compute_rate: f64,
    pub mem_bytes: u64,
    pub sto_bytes: u64,
}

impl Default for Resources {
    fn default() -> Self {
        Resources {
            compute_rate: 1.0,
            mem_bytes: 1 << 30,
            sto_bytes: 10 << 30,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub roles: Vec<Role>,
    pub addr: String,
    #[serde(default)]
    pub sid: Option<String>,
    #[serde(default)]
    pub resources: Resources,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkSpec {
    pub u: String,
    pub v: String,
    #[serde(default = "default_bw_mbps")]
    pub bw_mbps: f64,
    #[serde(default = "default_delay_us")]
    pub delay_us: u64,
    #[serde(default = "default_mtu")]
    pub mtu: u32,
}

fn default_bw_mbps() -> f64 {
    1000.0
}

fn default_delay_us() -> u64 {
    50
}

fn default_mtu() -> u32 {
    9000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    /// Expected node sequence of the primary service path; every
    /// consecutive pair must be a link. Empty disables the check.
    #[serde(default)]
    pub default_path: Vec<String>,
}

impl TopologyConfig {
    /// The ten-node evaluation topology: a v1..v5,v8 spine, NSFs v6/v7
    /// hanging off v3/v4, and a v3-v9-v10-v4 detour around (v3, v4).
    pub fn fig6() -> TopologyConfig {
        let node = |id: &str, roles: &[Role], n: u8, with_sid: bool| NodeSpec {
            id: id.to_string(),
            roles: roles.to_vec(),
            addr: format!("fd00::{:x}", n),
            sid: with_sid.then(|| format!("fd00::{:x}", n)),
            resources: Resources::default(),
        };
        let link = |u: &str, v: &str| LinkSpec {
            u: u.to_string(),
            v: v.to_string(),
            bw_mbps: default_bw_mbps(),
            delay_us: default_delay_us(),
            mtu: default_mtu(),
        };
        TopologyConfig {
            nodes: vec![
                node("v1", &[Role::Client], 1, false),
                node("v2", &[Role::SrSource, Role::Transit], 2, false),
                node("v3", &[Role::Transit], 3, false),
                node("v4", &[Role::Transit], 4, false),
                node("v5", &[Role::SrEndpoint, Role::Transit], 5, true),
                node("v6", &[Role::Nsf], 6, true),
                node("v7", &[Role::Nsf], 7, true),
                node("v8", &[Role::Server], 8, false),
                node("v9", &[Role::SrEndpoint, Role::Transit], 9, true),
                node("v10", &[Role::SrEndpoint, Role::Transit], 10, true),
            ],
            links: vec![
                link("v1", "v2"),
                link("v2", "v3"),
                link("v3", "v4"),
                link("v4", "v5"),
                link("v5", "v8"),
                link("v3", "v6"),
                link("v4", "v7"),
                link("v3", "v9"),
                link("v9", "v10"),
                link("v10", "v4"),
            ],
            default_path: ["v1", "v2", "v3", "v6", "v3", "v4", "v7", "v4", "v5", "v8"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub roles: Vec<Role>,
    pub addr: Sid,
    pub sid: Option<Sid>,
    pub resources: Resources,
}

impl Node {
    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

#[derive(Clone, Debug)]
pub struct Topology {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    /// Per node: (neighbor, link index), ascending by neighbor id.
    pub adj: Vec<Vec<(NodeId, usize)>>,
    by_name: BTreeMap<String, NodeId>,
    by_addr: BTreeMap<Sid, NodeId>,
    /// next_hop[from][to]; lowest-id neighbor on a shortest path.
    next_hop: Vec<Vec<Option<NodeId>>>,
    pub min_mtu: u32,
}

impl Topology {
    pub fn node_id(&self, name: &str) -> Result<NodeId, NetError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NetError::UnknownNode(name.to_string()))
    }

    pub fn node_by_addr(&self, addr: Sid) -> Option<NodeId> {
        self.by_addr.get(&addr).copied()
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id].name
    }

    pub fn next_hop(&self, from: NodeId, dst_addr: Sid) -> Result<NodeId, NetError> {
        let to = self
            .node_by_addr(dst_addr)
            .ok_or_else(|| NetError::UnknownNode(dst_addr.to_string()))?;
        self.next_hop[from][to].ok_or_else(|| {
            NetError::Disconnected(self.nodes[to].name.clone(), self.nodes[from].name.clone())
        })
    }

    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<usize> {
        self.adj[a].iter().find(|&&(n, _)| n == b).map(|&(_, l)| l)
    }

    pub fn single_role_node(&self, role: Role) -> Result<NodeId, NetError> {
        let mut found = None;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.has_role(role) {
                if found.is_some() {
                    return Err(NetError::RoleCount {
                        role: role.name().to_string(),
                        count: 2,
                    });
                }
                found = Some(i);
            }
        }
        found.ok_or(NetError::RoleCount {
            role: role.name().to_string(),
            count: 0,
        })
    }
}

fn parse_sid(s: &str, node: &str) -> Result<Sid, NetError> {
    s.parse()
        .map_err(|_| NetError::BadLink(node.to_string(), s.to_string(), "bad address".into()))
}

pub fn build_topology(cfg: &TopologyConfig) -> Result<Topology, NetError> {
    let mut by_name = BTreeMap::new();
    let mut by_addr = BTreeMap::new();
    let mut nodes = Vec::with_capacity(cfg.nodes.len());
    for (i, spec) in cfg.nodes.iter().enumerate() {
        if by_name.insert(spec.id.clone(), i).is_some() {
            return Err(NetError::DuplicateNode(spec.id.clone()));
        }
        let addr = parse_sid(&spec.addr, &spec.id)?;
        if by_addr.insert(addr, i).is_some() {
            return Err(NetError::DuplicateAddress(spec.addr.clone()));
        }
        let sid = match &spec.sid {
            Some(s) => Some(parse_sid(s, &spec.id)?),
            None => None,
        };
        for need in [Role::Nsf, Role::SrEndpoint] {
            if spec.roles.contains(&need) && sid.is_none() {
                return Err(NetError::MissingSid(spec.id.clone(), need.name().to_string()));
            }
        }
        nodes.push(Node {
            name: spec.id.clone(),
            roles: spec.roles.clone(),
            addr,
            sid,
            resources: spec.resources,
        });
    }

    let mut links = Vec::with_capacity(cfg.links.len());
    let mut adj = vec![Vec::new(); nodes.len()];
    let mut min_mtu = u32::MAX;
    for spec in &cfg.links {
        let bad = |what: &str| NetError::BadLink(spec.u.clone(), spec.v.clone(), what.to_string());
        let u = *by_name.get(&spec.u).ok_or_else(|| bad("unknown endpoint"))?;
        let v = *by_name.get(&spec.v).ok_or_else(|| bad("unknown endpoint"))?;
        if u == v {
            return Err(bad("self-loop"));
        }
        if !(spec.bw_mbps > 0.0) {
            return Err(bad("bandwidth must be positive"));
        }
        if spec.mtu < 1280 {
            return Err(bad("mtu below 1280"));
        }
        let id = links.len();
        links.push(Link::new(u, v, spec));
        adj[u].push((v, id));
        adj[v].push((u, id));
        min_mtu = min_mtu.min(spec.mtu);
    }
    for neighbors in &mut adj {
        neighbors.sort_unstable();
    }

    // All-pairs BFS distances over an unweighted graph.
    let n = nodes.len();
    let mut dist = vec![vec![u32::MAX; n]; n];
    for src in 0..n {
        let d = &mut dist[src];
        d[src] = 0;
        let mut frontier = std::collections::VecDeque::from([src]);
        while let Some(cur) = frontier.pop_front() {
            for &(next, _) in &adj[cur] {
                if d[next] == u32::MAX {
                    d[next] = d[cur] + 1;
                    frontier.push_back(next);
                }
            }
        }
    }
    for other in 1..n {
        if dist[0][other] == u32::MAX {
            return Err(NetError::Disconnected(
                nodes[other].name.clone(),
                nodes[0].name.clone(),
            ));
        }
    }
    let mut next_hop = vec![vec![None; n]; n];
    for from in 0..n {
        for to in 0..n {
            if from == to {
                next_hop[from][to] = Some(to);
                continue;
            }
            // adj is sorted, so the first match is the lowest-id neighbor.
            next_hop[from][to] = adj[from]
                .iter()
                .map(|&(nb, _)| nb)
                .find(|&nb| dist[nb][to] == dist[from][to].wrapping_sub(1));
        }
    }

    for pair in cfg.default_path.windows(2) {
        let u = *by_name
            .get(&pair[0])
            .ok_or_else(|| NetError::UnknownNode(pair[0].clone()))?;
        let v = *by_name
            .get(&pair[1])
            .ok_or_else(|| NetError::UnknownNode(pair[1].clone()))?;
        if !adj[u].iter().any(|&(nb, _)| nb == v) {
            return Err(NetError::MissingPathLink(pair[0].clone(), pair[1].clone()));
        }
    }

    Ok(Topology {
        nodes,
        links,
        adj,
        by_name,
        by_addr,
        next_hop,
        min_mtu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig6() -> Topology {
        build_topology(&TopologyConfig::fig6()).unwrap()
    }

    #[test]
    fn fig6_preset_shape() {
        let t = fig6();
        assert_eq!(t.nodes.len(), 10);
        assert_eq!(t.links.len(), 10);
        assert_eq!(t.single_role_node(Role::Client).unwrap(), t.node_id("v1").unwrap());
        assert_eq!(t.single_role_node(Role::Server).unwrap(), t.node_id("v8").unwrap());
        for nsf in ["v6", "v7"] {
            let id = t.node_id(nsf).unwrap();
            assert!(t.nodes[id].has_role(Role::Nsf));
            assert!(t.nodes[id].sid.is_some());
        }
        assert!(t.nodes[t.node_id("v5").unwrap()].has_role(Role::SrEndpoint));
        assert_eq!(t.min_mtu, 9000);
    }

    #[test]
    fn shortest_path_next_hops() {
        let t = fig6();
        let id = |n: &str| t.node_id(n).unwrap();
        let addr = |n: &str| t.nodes[id(n)].addr;
        assert_eq!(t.next_hop(id("v3"), addr("v8")).unwrap(), id("v4"));
        assert_eq!(t.next_hop(id("v5"), addr("v8")).unwrap(), id("v8"));
        assert_eq!(t.next_hop(id("v3"), addr("v6")).unwrap(), id("v6"));
        assert_eq!(t.next_hop(id("v1"), addr("v8")).unwrap(), id("v2"));
        assert_eq!(t.next_hop(id("v7"), addr("v10")).unwrap(), id("v4"));
        assert_eq!(t.next_hop(id("v9"), addr("v6")).unwrap(), id("v3"));
    }

    #[test]
    fn removed_spine_link_fails_default_path() {
        let mut cfg = TopologyConfig::fig6();
        cfg.links.retain(|l| !(l.u == "v3" && l.v == "v4"));
        // Still connected through the detour, but the declared path breaks.
        let err = build_topology(&cfg).unwrap_err();
        assert_eq!(err, NetError::MissingPathLink("v3".into(), "v4".into()));
    }

    #[test]
    fn minimal_two_node_net() {
        let cfg = TopologyConfig {
            nodes: vec![
                NodeSpec {
                    id: "a".into(),
                    roles: vec![Role::Client],
                    addr: "fd00::1".into(),
                    sid: None,
                    resources: Resources::default(),
                },
                NodeSpec {
                    id: "b".into(),
                    roles: vec![Role::Server],
                    addr: "fd00::2".into(),
                    sid: None,
                    resources: Resources::default(),
                },
            ],
            links: vec![LinkSpec {
                u: "a".into(),
                v: "b".into(),
                bw_mbps: 100.0,
                delay_us: 10,
                mtu: 1500,
            }],
            default_path: vec![],
        };
        let t = build_topology(&cfg).unwrap();
        assert_eq!(t.next_hop(0, t.nodes[1].addr).unwrap(), 1);
    }

    #[test]
    fn build_rejects_bad_configs() {
        let mut dup = TopologyConfig::fig6();
        dup.nodes[1].id = "v1".into();
        assert!(matches!(build_topology(&dup), Err(NetError::DuplicateNode(_))));

        let mut no_sid = TopologyConfig::fig6();
        no_sid.nodes[5].sid = None;
        assert!(matches!(build_topology(&no_sid), Err(NetError::MissingSid(..))));

        let mut island = TopologyConfig::fig6();
        island.links.retain(|l| l.u != "v1" && l.v != "v1");
        island.default_path.clear();
        assert!(matches!(build_topology(&island), Err(NetError::Disconnected(..))));

        let mut tiny_mtu = TopologyConfig::fig6();
        tiny_mtu.links[0].mtu = 1000;
        assert!(matches!(build_topology(&tiny_mtu), Err(NetError::BadLink(..))));
    }

    #[test]
    fn tie_break_prefers_lowest_id() {
        // Two equal-length paths a-b-d and a-c-d; b is created first.
        let mk = |id: &str, n: u8| NodeSpec {
            id: id.into(),
            roles: vec![Role::Transit],
            addr: format!("fd00::{:x}", n),
            sid: None,
            resources: Resources::default(),
        };
        let link = |u: &str, v: &str| LinkSpec {
            u: u.into(),
            v: v.into(),
            bw_mbps: 100.0,
            delay_us: 10,
            mtu: 1500,
        };
        let cfg = TopologyConfig {
            nodes: vec![mk("a", 1), mk("b", 2), mk("c", 3), mk("d", 4)],
            links: vec![link("a", "b"), link("a", "c"), link("b", "d"), link("c", "d")],
            default_path: vec![],
        };
        let t = build_topology(&cfg).unwrap();
        assert_eq!(t.next_hop(0, t.nodes[3].addr).unwrap(), 1);
    }
}
