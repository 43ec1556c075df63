//! Cluster topology: racks of nodes, ranks pinned to nodes, link parameters,
//! and the intra-rack ring that assigns each rank its replication peer.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub type RankId = usize;
pub type NodeId = usize;
pub type RackId = usize;

/// Per-tier probe latencies in simulated seconds, paid when recovery checks a
/// tier for a shard before fetching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeLatency {
    pub tier1: f64,
    pub tier2: f64,
    pub tier3: f64,
}

impl Default for ProbeLatency {
    fn default() -> Self {
        Self {
            tier1: 0.05,
            tier2: 0.15,
            tier3: 0.5,
        }
    }
}

/// Link bandwidths in bytes per simulated second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// Local-memory copy rate used for Tier-1 fetches.
    pub tier1_bw: f64,
    /// Cross-node bandwidth inside a rack (Tier-2 replication and fetch).
    pub intra_rack_bw: f64,
    /// Per-node uplink to remote persistent storage.
    pub tier3_bw: f64,
    pub probe_latency: ProbeLatency,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            tier1_bw: 16.0e9,
            intra_rack_bw: 2.0e9,
            tier3_bw: 0.4e9,
            probe_latency: ProbeLatency::default(),
        }
    }
}

/// Static cluster layout. Nodes and ranks use dense global indices; rack `r`
/// owns a contiguous run of nodes and node `n` a contiguous run of ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    /// Per rack: the node ids it contains.
    pub racks: Vec<Vec<NodeId>>,
    /// Per node: the global rank ids it hosts.
    pub node_ranks: Vec<Vec<RankId>>,
    pub links: LinkParams,
}

impl Topology {
    /// Uniform grid: `racks x nodes_per_rack x ranks_per_node`.
    pub fn grid(
        racks: usize,
        nodes_per_rack: usize,
        ranks_per_node: usize,
        links: LinkParams,
    ) -> Result<Self, ConfigError> {
        if racks == 0 {
            return Err(ConfigError::new("topology.racks", "must be >= 1"));
        }
        if nodes_per_rack == 0 {
            return Err(ConfigError::new("topology.nodes_per_rack", "must be >= 1"));
        }
        if ranks_per_node == 0 {
            return Err(ConfigError::new("topology.ranks_per_node", "must be >= 1"));
        }
        let mut rack_list = Vec::with_capacity(racks);
        let mut node_ranks = Vec::with_capacity(racks * nodes_per_rack);
        let mut next_rank = 0;
        for rack in 0..racks {
            let mut nodes = Vec::with_capacity(nodes_per_rack);
            for local in 0..nodes_per_rack {
                let node = rack * nodes_per_rack + local;
                nodes.push(node);
                node_ranks.push((next_rank..next_rank + ranks_per_node).collect());
                next_rank += ranks_per_node;
            }
            rack_list.push(nodes);
        }
        let topo = Self {
            racks: rack_list,
            node_ranks,
            links,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.racks.is_empty() {
            return Err(ConfigError::new("topology.racks", "must be >= 1"));
        }
        let mut seen_nodes = vec![false; self.node_ranks.len()];
        for (rid, nodes) in self.racks.iter().enumerate() {
            for &n in nodes {
                if n >= self.node_ranks.len() || seen_nodes[n] {
                    return Err(ConfigError::new(
                        format!("topology.racks[{rid}]"),
                        format!("node {n} missing or duplicated"),
                    ));
                }
                seen_nodes[n] = true;
            }
        }
        let mut ranks: Vec<RankId> = self.node_ranks.iter().flatten().copied().collect();
        ranks.sort_unstable();
        for (i, &r) in ranks.iter().enumerate() {
            if r != i {
                return Err(ConfigError::new(
                    "topology.node_ranks",
                    "rank ids must be dense and globally unique",
                ));
            }
        }
        if !(self.links.tier1_bw > 0.0 && self.links.intra_rack_bw > 0.0 && self.links.tier3_bw > 0.0)
        {
            return Err(ConfigError::new("topology.links", "bandwidths must be > 0"));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ranks.len()
    }

    pub fn num_ranks(&self) -> usize {
        self.node_ranks.iter().map(|r| r.len()).sum()
    }

    pub fn node_of_rank(&self, rank: RankId) -> NodeId {
        self.node_ranks
            .iter()
            .position(|ranks| ranks.contains(&rank))
            .expect("rank must be mapped to a node")
    }

    pub fn rack_of_node(&self, node: NodeId) -> RackId {
        self.racks
            .iter()
            .position(|nodes| nodes.contains(&node))
            .expect("node must be mapped to a rack")
    }

    /// True when every rack has at least two nodes, i.e. peer replication is
    /// possible everywhere.
    pub fn peer_replication_possible(&self) -> bool {
        self.racks.iter().all(|nodes| nodes.len() >= 2)
    }
}

/// Ring-based replication peer assignment: each rank backs up to the rank at
/// the same local slot on the next node within its rack, so replicas always
/// leave the local node's failure domain but stay inside the rack.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerMap {
    /// rank -> (peer node, peer rank)
    peers: Vec<(NodeId, RankId)>,
}

impl PeerMap {
    /// Builds the ring. Returns `None` when some rack has a single node, in
    /// which case Tier-2 replication is disabled for the whole run.
    pub fn build(topo: &Topology) -> Option<Self> {
        if !topo.peer_replication_possible() {
            return None;
        }
        let mut peers = vec![(0usize, 0usize); topo.num_ranks()];
        for nodes in &topo.racks {
            for (pos, &node) in nodes.iter().enumerate() {
                let next = nodes[(pos + 1) % nodes.len()];
                let from = &topo.node_ranks[node];
                let to = &topo.node_ranks[next];
                assert_eq!(
                    from.len(),
                    to.len(),
                    "ring peering requires equal ranks per node within a rack"
                );
                for (slot, &rank) in from.iter().enumerate() {
                    peers[rank] = (next, to[slot]);
                }
            }
        }
        Some(Self { peers })
    }

    pub fn peer_node(&self, rank: RankId) -> NodeId {
        self.peers[rank].0
    }

    pub fn peer_rank(&self, rank: RankId) -> RankId {
        self.peers[rank].1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_builds_dense_ids() {
        let topo = Topology::grid(2, 2, 2, LinkParams::default()).unwrap();
        assert_eq!(topo.num_nodes(), 4);
        assert_eq!(topo.num_ranks(), 8);
        assert_eq!(topo.node_of_rank(5), 2);
        assert_eq!(topo.rack_of_node(3), 1);
    }

    #[test]
    fn ring_peer_leaves_node_stays_in_rack() {
        let topo = Topology::grid(2, 3, 2, LinkParams::default()).unwrap();
        let peers = PeerMap::build(&topo).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for rank in 0..topo.num_ranks() {
            let own_node = topo.node_of_rank(rank);
            let peer_node = peers.peer_node(rank);
            assert_ne!(peer_node, own_node, "rank {rank} peered to its own node");
            assert_eq!(
                topo.rack_of_node(peer_node),
                topo.rack_of_node(own_node),
                "rank {rank} peered across racks"
            );
            assert!(seen.insert(peers.peer_rank(rank)), "peer map not a bijection");
        }
        assert_eq!(seen.len(), topo.num_ranks());
    }

    #[test]
    fn single_node_rack_disables_peering() {
        let topo = Topology::grid(1, 1, 4, LinkParams::default()).unwrap();
        assert!(PeerMap::build(&topo).is_none());
    }

    #[test]
    fn zero_sized_grid_rejected() {
        assert!(Topology::grid(0, 2, 2, LinkParams::default()).is_err());
        assert!(Topology::grid(2, 0, 2, LinkParams::default()).is_err());
        assert!(Topology::grid(2, 2, 0, LinkParams::default()).is_err());
    }
}
