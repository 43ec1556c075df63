//! Watermark-driven garbage collection. The watermark is the highest base
//! version durably committed to Tier-3 by every participating node; it is
//! advanced only by the coordinator and broadcast as a single event, and all
//! reclamation is gated on it. A deliberately broken "naive" policy that
//! reclaims on local progress is kept for counterexample scenarios.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use crate::tier::{Cluster, ObjectKey, Tier, TierCatalog, Version};
use crate::topology::{PeerMap, RankId, Topology};

/// Global reclamation watermark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Watermark {
    pub version: Version,
    pub advanced_at: f64,
}

impl Watermark {
    pub fn initial() -> Self {
        Self {
            version: Version(0),
            advanced_at: 0.0,
        }
    }
}

/// Computes the new watermark from the globally committed base versions.
/// Returns `Some` only when it strictly advances; the sequence of broadcast
/// watermarks is therefore monotonic.
pub fn advance_watermark(
    current: &Watermark,
    committed_bases: &BTreeSet<Version>,
    now: f64,
) -> Option<Watermark> {
    let newest = committed_bases.iter().next_back()?;
    if *newest > current.version {
        Some(Watermark {
            version: *newest,
            advanced_at: now,
        })
    } else {
        None
    }
}

/// Highest base version each node has fully persisted (all of its ranks'
/// shards finalized with markers). Feeds the watermark trace.
pub fn committed_map(catalog: &TierCatalog, topo: &Topology) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    let versions: BTreeSet<Version> = catalog
        .tier3_objects
        .iter()
        .filter_map(|k| match k {
            ObjectKey::Base { version, .. } => Some(*version),
            ObjectKey::Diff { .. } => None,
        })
        .collect();
    for (node, ranks) in topo.node_ranks.iter().enumerate() {
        let max_done = versions
            .iter()
            .rev()
            .find(|v| {
                ranks.iter().all(|&rank| {
                    catalog.tier3_objects.contains(&ObjectKey::Base {
                        rank,
                        version: **v,
                    })
                })
            })
            .copied();
        if let Some(v) = max_done {
            out.insert(node.to_string(), v.0);
        }
    }
    out
}

/// Watermark-gated reclamation for one rank. Deletes, across tiers:
/// differential batches ending at or before the watermark, volatile base
/// copies older than it (the base at the watermark itself is kept as the
/// globally safe anchor), and Tier-3 history older than one extra base
/// interval of differentials.
pub fn reclaim(
    cluster: &mut Cluster,
    topo: &Topology,
    peers: Option<&PeerMap>,
    rank: RankId,
    w: Version,
    base_interval: u64,
) -> Vec<(Tier, ObjectKey)> {
    let mut deleted = Vec::new();
    let home = topo.node_of_rank(rank);

    // Own Tier-1 history.
    let t1_victims: Vec<ObjectKey> = cluster.nodes[home]
        .tier1_keys()
        .filter(|k| k.rank() == rank && volatile_obsolete(k, w))
        .copied()
        .collect();
    for key in t1_victims {
        cluster.delete_tier1(home, &key);
        deleted.push((Tier::Tier1, key));
    }

    // Hosted peer replicas: each hosted object is cleaned by the one local
    // rank that is its owner's ring peer.
    if let Some(peers) = peers {
        let t2_victims: Vec<ObjectKey> = cluster.nodes[home]
            .tier2_keys()
            .filter(|k| peers.peer_rank(k.rank()) == rank && volatile_obsolete(k, w))
            .copied()
            .collect();
        for key in t2_victims {
            cluster.delete_tier2(home, &key);
            deleted.push((Tier::Tier2, key));
        }
    }

    // Tier-3: bases strictly older than the watermark, and differential
    // batches retained for one additional base interval.
    let t3_victims: Vec<ObjectKey> = cluster
        .catalog()
        .tier3_objects
        .iter()
        .filter(|k| k.rank() == rank)
        .filter(|k| match k {
            ObjectKey::Base { version, .. } => *version < w,
            ObjectKey::Diff { range, .. } => {
                w.0 >= base_interval && range.end <= w.0 - base_interval
            }
        })
        .copied()
        .collect();
    for key in t3_victims {
        if cluster.tier3_delete(&key).unwrap_or(0) > 0 {
            deleted.push((Tier::Tier3, key));
        }
    }
    deleted
}

fn volatile_obsolete(key: &ObjectKey, w: Version) -> bool {
    match key {
        ObjectKey::Base { version, .. } => *version < w,
        ObjectKey::Diff { range, .. } => range.end <= w.0,
    }
}

/// Broken local-age policy: as soon as a rank locally completes base version
/// `local`, it purges its own volatile history and the replicas it pushed to
/// its peer, without waiting for durable commits anywhere.
pub fn naive_reclaim(
    cluster: &mut Cluster,
    topo: &Topology,
    peers: Option<&PeerMap>,
    rank: RankId,
    local: Version,
) -> Vec<(Tier, ObjectKey)> {
    let mut deleted = Vec::new();
    let home = topo.node_of_rank(rank);
    let t1_victims: Vec<ObjectKey> = cluster.nodes[home]
        .tier1_keys()
        .filter(|k| k.rank() == rank && volatile_obsolete(k, local))
        .copied()
        .collect();
    for key in t1_victims {
        cluster.delete_tier1(home, &key);
        deleted.push((Tier::Tier1, key));
    }
    if let Some(peers) = peers {
        let host = peers.peer_node(rank);
        let t2_victims: Vec<ObjectKey> = cluster.nodes[host]
            .tier2_keys()
            .filter(|k| k.rank() == rank && volatile_obsolete(k, local))
            .copied()
            .collect();
        for key in t2_victims {
            cluster.delete_tier2(host, &key);
            deleted.push((Tier::Tier2, key));
        }
    }
    deleted
}
