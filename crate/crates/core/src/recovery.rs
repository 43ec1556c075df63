//! Post-failure recovery: global consensus on the latest recoverable state,
//! cost-ordered loading of surviving shards, and fused multi-step replay of
//! differential checkpoints.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::compress;
use crate::error::{ProtocolError, RecoveryError};
use crate::state::{
    adam_update_elem, bias_corrections, broadcast_weights, native_step, AdamParams, TrainingState,
};
use crate::tier::{Cluster, DiffBatch, DiffRange, ObjectKey, Version};
use crate::topology::{NodeId, PeerMap, RankId, Topology};

/// Recovery source, ordered by retrieval cost. `ClusterPeer` covers the
/// replicated weight slices other data-parallel ranks can serve; optimizer
/// shards exist on exactly one rank, so base and diff objects never resolve
/// to it.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SourceTier {
    Tier1,
    Tier2,
    ClusterPeer,
    Tier3,
}

/// Per-version base availability: local Tier-1 copy, designated peer's
/// Tier-2 replica, and a committed Tier-3 copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityTuple {
    pub version: Version,
    pub s1: bool,
    pub s2: bool,
    pub s3: bool,
}

impl AvailabilityTuple {
    pub fn any(&self) -> bool {
        self.s1 || self.s2 || self.s3
    }
}

/// What one rank can obtain from surviving storage after a failure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankView {
    pub rank: RankId,
    pub base_sources: BTreeMap<Version, BTreeSet<SourceTier>>,
    pub diff_sources: BTreeMap<DiffRange, BTreeSet<SourceTier>>,
}

impl RankView {
    /// Scans the post-failure cluster for everything `rank` can reach: its
    /// node's Tier-1, its designated peer's Tier-2 replicas, and committed
    /// Tier-3 objects.
    pub fn collect(
        rank: RankId,
        cluster: &Cluster,
        topo: &Topology,
        peers: Option<&PeerMap>,
    ) -> Self {
        let mut view = RankView {
            rank,
            ..RankView::default()
        };
        let home = topo.node_of_rank(rank);
        for key in cluster.nodes[home].tier1_keys() {
            if key.rank() != rank {
                continue;
            }
            match key {
                ObjectKey::Base { version, .. } => {
                    view.base_sources
                        .entry(*version)
                        .or_default()
                        .insert(SourceTier::Tier1);
                }
                ObjectKey::Diff { range, .. } => {
                    view.diff_sources
                        .entry(*range)
                        .or_default()
                        .insert(SourceTier::Tier1);
                }
            }
        }
        if let Some(peers) = peers {
            let host = peers.peer_node(rank);
            for key in cluster.nodes[host].tier2_keys() {
                if key.rank() != rank {
                    continue;
                }
                match key {
                    ObjectKey::Base { version, .. } => {
                        view.base_sources
                            .entry(*version)
                            .or_default()
                            .insert(SourceTier::Tier2);
                    }
                    ObjectKey::Diff { range, .. } => {
                        view.diff_sources
                            .entry(*range)
                            .or_default()
                            .insert(SourceTier::Tier2);
                    }
                }
            }
        }
        let catalog = cluster.catalog();
        for v in &catalog.tier3_committed_bases {
            view.base_sources
                .entry(*v)
                .or_default()
                .insert(SourceTier::Tier3);
        }
        for r in &catalog.tier3_committed_diffs {
            view.diff_sources
                .entry(*r)
                .or_default()
                .insert(SourceTier::Tier3);
        }
        view
    }

    pub fn base_obtainable(&self, version: Version) -> bool {
        self.base_sources
            .get(&version)
            .is_some_and(|s| !s.is_empty())
    }

    pub fn diff_obtainable(&self, range: DiffRange) -> bool {
        self.diff_sources
            .get(&range)
            .is_some_and(|s| !s.is_empty())
    }
}

/// Classifies one version's base-checkpoint availability for a rank.
pub fn classify(version: Version, view: &RankView) -> AvailabilityTuple {
    let sources = view.base_sources.get(&version);
    let has = |tier| sources.is_some_and(|s| s.contains(&tier));
    AvailabilityTuple {
        version,
        s1: has(SourceTier::Tier1),
        s2: has(SourceTier::Tier2),
        s3: has(SourceTier::Tier3),
    }
}

/// Global consensus over per-rank availability: the anchor is the freshest
/// base version every rank can obtain from some surviving tier, and the
/// replay boundary is the furthest iteration reachable through differential
/// batches contiguously obtainable by every rank. Ranks holding fresher
/// bases than the anchor simply discard the excess.
pub fn consensus(
    views: &[RankView],
    batch_len: u64,
) -> Result<(Version, u64), RecoveryError> {
    assert!(!views.is_empty());
    let mut candidates: BTreeSet<Version> = views[0].base_sources.keys().copied().collect();
    for view in &views[1..] {
        candidates.retain(|v| view.base_obtainable(*v));
    }
    let anchor = candidates
        .into_iter()
        .next_back()
        .ok_or(RecoveryError::Unrecoverable)?;

    let mut end = anchor.0;
    loop {
        let next = DiffRange::new(end, end + batch_len - 1);
        if views.iter().all(|v| v.diff_obtainable(next)) {
            end = next.reaches();
        } else {
            break;
        }
    }
    Ok((anchor, end))
}

/// Loading plan for one rank: a source for its anchor shard and for each
/// differential batch in the replay chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankPlan {
    pub rank: RankId,
    pub base_source: SourceTier,
    pub diff_sources: Vec<(DiffRange, SourceTier)>,
}

/// Cluster-wide recovery plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryPlan {
    pub anchor: Version,
    pub replay_end: u64,
    pub per_rank: Vec<RankPlan>,
    /// Deepest tier any fetch falls back to.
    pub fallback_used: SourceTier,
    /// Tier-3 files grouped under one leader per node; the leader fetches
    /// exactly the files its local ranks need.
    #[serde(skip)]
    pub tier3_leader_fetches: BTreeMap<NodeId, Vec<ObjectKey>>,
}

/// Chooses the cheapest surviving source for every object each rank needs.
pub fn plan_loading(
    anchor: Version,
    replay_end: u64,
    views: &[RankView],
    topo: &Topology,
    batch_len: u64,
) -> Result<RecoveryPlan, RecoveryError> {
    let mut per_rank = Vec::with_capacity(views.len());
    let mut fallback = SourceTier::Tier1;
    let mut leader: BTreeMap<NodeId, Vec<ObjectKey>> = BTreeMap::new();
    for view in views {
        let base_source = cheapest(view.base_sources.get(&anchor))
            .ok_or(RecoveryError::Unrecoverable)?;
        fallback = fallback.max(base_source);
        if base_source == SourceTier::Tier3 {
            leader
                .entry(topo.node_of_rank(view.rank))
                .or_default()
                .push(ObjectKey::Base {
                    rank: view.rank,
                    version: anchor,
                });
        }
        let mut diff_sources = Vec::new();
        let mut cur = anchor.0;
        while cur < replay_end {
            let range = DiffRange::new(cur, cur + batch_len - 1);
            let source = cheapest(view.diff_sources.get(&range)).ok_or_else(|| {
                RecoveryError::Protocol(ProtocolError::BatchGap {
                    expected: cur,
                    actual: replay_end,
                })
            })?;
            fallback = fallback.max(source);
            if source == SourceTier::Tier3 {
                leader
                    .entry(topo.node_of_rank(view.rank))
                    .or_default()
                    .push(ObjectKey::Diff {
                        rank: view.rank,
                        range,
                    });
            }
            diff_sources.push((range, source));
            cur = range.reaches();
        }
        per_rank.push(RankPlan {
            rank: view.rank,
            base_source,
            diff_sources,
        });
    }
    Ok(RecoveryPlan {
        anchor,
        replay_end,
        per_rank,
        fallback_used: fallback,
        tier3_leader_fetches: leader,
    })
}

fn cheapest(sources: Option<&BTreeSet<SourceTier>>) -> Option<SourceTier> {
    sources.and_then(|s| s.iter().next().copied())
}

/// Replays differential batches on top of freshly loaded anchor states.
///
/// Each batch of N payloads is consumed as one fused pass over the first
/// N - 1 gradients (a single read and write of master weights and both
/// moments per element, updates applied in temporal order), followed by the
/// final update through the native optimizer path so post-update broadcast
/// and loss-scaler transitions still happen. Arithmetic is routed through
/// the same per-element kernel as the native step, so the result is
/// bit-identical to a sequential per-step replay of the same gradients.
pub fn fused_replay(
    states: &mut [TrainingState],
    batches_per_rank: &[Vec<DiffBatch>],
    hp: &AdamParams,
) -> Result<(), RecoveryError> {
    assert_eq!(states.len(), batches_per_rank.len());
    let chain_len = batches_per_rank
        .first()
        .map(|b| b.len())
        .unwrap_or_default();
    for chain in batches_per_rank {
        if chain.len() != chain_len {
            return Err(ProtocolError::BatchGap {
                expected: chain_len as u64,
                actual: chain.len() as u64,
            }
            .into());
        }
    }
    let phi = states.first().map(|s| s.phi).unwrap_or(0);
    for bi in 0..chain_len {
        let expect_start = states.first().map(|s| s.step).unwrap_or(0);
        // Decode every rank's batch up front; lengths and chain continuity
        // are protocol errors, payload damage is corruption.
        let mut grads_per_rank: Vec<Vec<Vec<f32>>> = Vec::with_capacity(states.len());
        let mut n = 0u64;
        for (state, chain) in states.iter().zip(batches_per_rank) {
            let batch = &chain[bi];
            if batch.start_iter != expect_start {
                return Err(ProtocolError::BatchGap {
                    expected: expect_start,
                    actual: batch.start_iter,
                }
                .into());
            }
            n = batch.range().len();
            let own = state.partition();
            let mut grads = Vec::with_capacity(batch.payloads.len());
            for payload in &batch.payloads {
                let g = compress::decompress(payload)
                    .map_err(|e| RecoveryError::Store(crate::error::StoreError::Corruption(e.to_string())))?;
                if g.len() != own.len {
                    return Err(ProtocolError::LengthMismatch {
                        expected: own.len,
                        actual: g.len(),
                    }
                    .into());
                }
                grads.push(g);
            }
            grads_per_rank.push(grads);
        }

        // Fused pass: the first N - 1 updates, one sweep per rank.
        let fused_steps = (n - 1) as usize;
        for (state, grads) in states.iter_mut().zip(&grads_per_rank) {
            let own = state.partition();
            let corrections: Vec<(f32, f32)> = (0..fused_steps)
                .map(|k| bias_corrections(hp, state.step + k as u64 + 1))
                .collect();
            for i in 0..own.len {
                let w = &mut state.master_weights[i];
                let m = &mut state.moment1[i];
                let v = &mut state.moment2[i];
                for k in 0..fused_steps {
                    adam_update_elem(w, m, v, grads[k][i], hp, corrections[k].0, corrections[k].1);
                }
            }
            for i in 0..own.len {
                state.fp16_weights[own.start + i] =
                    crate::f16::round_f16(state.master_weights[i]);
            }
            state.step += fused_steps as u64;
        }

        // Final update of the batch through the native optimizer path.
        let mut full = vec![0.0f32; phi];
        for (state, grads) in states.iter().zip(&grads_per_rank) {
            let own = state.partition();
            full[own.range()].copy_from_slice(&grads[fused_steps]);
        }
        native_step(states, &full, hp)?;
    }
    broadcast_weights(states).map_err(RecoveryError::Protocol)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::CompressConfig;
    use crate::rng::SplitMix64;
    use crate::state::shard_of;

    fn view_with(
        rank: RankId,
        bases: &[(u64, SourceTier)],
        diffs: &[(u64, u64, SourceTier)],
    ) -> RankView {
        let mut view = RankView {
            rank,
            ..RankView::default()
        };
        for (v, tier) in bases {
            view.base_sources
                .entry(Version(*v))
                .or_default()
                .insert(*tier);
        }
        for (s, e, tier) in diffs {
            view.diff_sources
                .entry(DiffRange::new(*s, *e))
                .or_default()
                .insert(*tier);
        }
        view
    }

    #[test]
    fn consensus_takes_global_minimum_of_maxima() {
        // Tier-3 committed versions are visible to everyone, so the rank
        // with the older freshest base pins the anchor.
        let a = view_with(0, &[(10, SourceTier::Tier3), (20, SourceTier::Tier1)], &[]);
        let b = view_with(1, &[(10, SourceTier::Tier3)], &[]);
        let (anchor, end) = consensus(&[a, b], 5).unwrap();
        assert_eq!(anchor, Version(10));
        assert_eq!(end, 10);
    }

    #[test]
    fn consensus_single_rank_uses_own_max() {
        let a = view_with(
            0,
            &[(0, SourceTier::Tier3), (50, SourceTier::Tier1)],
            &[(50, 54, SourceTier::Tier1)],
        );
        let (anchor, end) = consensus(&[a], 5).unwrap();
        assert_eq!(anchor, Version(50));
        assert_eq!(end, 55);
    }

    #[test]
    fn consensus_unrecoverable_without_common_base() {
        let a = view_with(0, &[(10, SourceTier::Tier1)], &[]);
        let b = view_with(1, &[], &[]);
        assert!(matches!(
            consensus(&[a, b], 5),
            Err(RecoveryError::Unrecoverable)
        ));
    }

    #[test]
    fn replay_boundary_stops_at_first_gap() {
        let mk = |diffs: &[(u64, u64)]| {
            let spec: Vec<(u64, u64, SourceTier)> = diffs
                .iter()
                .map(|(s, e)| (*s, *e, SourceTier::Tier1))
                .collect();
            view_with(0, &[(0, SourceTier::Tier3)], &spec)
        };
        let full = mk(&[(0, 4), (5, 9), (10, 14)]);
        let gappy = view_with(
            1,
            &[(0, SourceTier::Tier3)],
            &[(0, 4, SourceTier::Tier2), (10, 14, SourceTier::Tier2)],
        );
        let (anchor, end) = consensus(&[full, gappy], 5).unwrap();
        assert_eq!(anchor, Version(0));
        assert_eq!(end, 5, "chain must stop before the [5,9] gap");
    }

    #[test]
    fn classify_reflects_tier_presence() {
        let view = view_with(
            0,
            &[(50, SourceTier::Tier1), (50, SourceTier::Tier3)],
            &[],
        );
        let t = classify(Version(50), &view);
        assert!(t.s1 && !t.s2 && t.s3);
        let missing = classify(Version(100), &view);
        assert!(!missing.any());
    }

    #[test]
    fn plan_prefers_cheapest_surviving_tier() {
        let topo = Topology::grid(1, 2, 1, crate::topology::LinkParams::default()).unwrap();
        let all = view_with(
            0,
            &[(0, SourceTier::Tier1), (0, SourceTier::Tier2), (0, SourceTier::Tier3)],
            &[(0, 4, SourceTier::Tier2), (0, 4, SourceTier::Tier3)],
        );
        let remote_only = view_with(1, &[(0, SourceTier::Tier3)], &[(0, 4, SourceTier::Tier3)]);
        let plan = plan_loading(Version(0), 5, &[all, remote_only], &topo, 5).unwrap();
        assert_eq!(plan.per_rank[0].base_source, SourceTier::Tier1);
        assert_eq!(plan.per_rank[0].diff_sources[0].1, SourceTier::Tier2);
        assert_eq!(plan.per_rank[1].base_source, SourceTier::Tier3);
        assert_eq!(plan.fallback_used, SourceTier::Tier3);
        // Leader fetch list covers exactly rank 1's needs.
        let fetches = &plan.tier3_leader_fetches[&topo.node_of_rank(1)];
        assert_eq!(fetches.len(), 2);
    }

    fn random_batches(
        phi: usize,
        dp: usize,
        anchor: u64,
        batches: usize,
        n: u64,
        seed: u64,
        lossless: bool,
    ) -> Vec<Vec<DiffBatch>> {
        let cfg = CompressConfig {
            small_threshold: 4,
            k: 0.2,
            sample_size: 512,
            chunk_limit: 1 << 20,
        };
        let mut rng = SplitMix64::new(seed);
        let mut out = vec![Vec::new(); dp];
        for b in 0..batches {
            let start = anchor + b as u64 * n;
            // One shared full gradient per iteration, sliced per rank.
            let mut full_grads = Vec::new();
            for _ in 0..n {
                let full: Vec<f32> = (0..phi).map(|_| rng.next_symmetric_f32()).collect();
                full_grads.push(full);
            }
            for (rank, chain) in out.iter_mut().enumerate() {
                let own = crate::state::Partition::for_rank(phi, dp, rank);
                let payloads = full_grads
                    .iter()
                    .enumerate()
                    .map(|(k, full)| {
                        let slice = &full[own.range()];
                        if lossless {
                            crate::compress::CompressedPayload::RawDense {
                                values: slice.to_vec(),
                            }
                        } else {
                            compress::compress(slice, seed ^ (b as u64) << 8 ^ k as u64, &cfg)
                        }
                    })
                    .collect();
                chain.push(DiffBatch {
                    rank,
                    start_iter: start,
                    end_iter: start + n - 1,
                    payloads,
                });
            }
        }
        out
    }

    /// Sequential oracle: every replayed iteration goes through the native
    /// per-step path.
    fn sequential_replay(
        states: &mut [TrainingState],
        batches_per_rank: &[Vec<DiffBatch>],
        hp: &AdamParams,
    ) {
        let phi = states[0].phi;
        let chain_len = batches_per_rank[0].len();
        for bi in 0..chain_len {
            let n = batches_per_rank[0][bi].range().len();
            for k in 0..n as usize {
                let mut full = vec![0.0f32; phi];
                for (state, chain) in states.iter().zip(batches_per_rank) {
                    let own = state.partition();
                    let g = compress::decompress(&chain[bi].payloads[k]).unwrap();
                    full[own.range()].copy_from_slice(&g);
                }
                native_step(states, &full, hp).unwrap();
            }
        }
    }

    #[test]
    fn fused_replay_matches_sequential_oracle_bitwise() {
        let phi = 256;
        let hp = AdamParams::default();
        for (dp, n) in [(1usize, 1u64), (1, 2), (2, 5), (4, 10)] {
            let batches = (20 / n).max(1) as usize;
            let chains = random_batches(phi, dp, 0, batches, n, 42 + n, false);
            let mut fused = TrainingState::new_group(phi, dp);
            let mut seq = TrainingState::new_group(phi, dp);
            fused_replay(&mut fused, &chains, &hp).unwrap();
            sequential_replay(&mut seq, &chains, &hp);
            for (f, s) in fused.iter().zip(&seq) {
                assert!(
                    f.content_eq(s),
                    "dp={dp} n={n} rank {} diverged",
                    f.rank
                );
            }
            // Scaler ticks expose the fused path: one native step per batch
            // versus one per iteration.
            assert_eq!(fused[0].scaler_ticks, batches as u64);
            assert_eq!(seq[0].scaler_ticks, (batches as u64) * n);
        }
    }

    #[test]
    fn zero_gradient_replay_only_decays_moments() {
        let phi = 32;
        let hp = AdamParams::default();
        let zeros = vec![0.0f32; phi];
        let payloads: Vec<_> = (0..5)
            .map(|_| crate::compress::CompressedPayload::RawDense {
                values: zeros.clone(),
            })
            .collect();
        let chain = vec![vec![DiffBatch {
            rank: 0,
            start_iter: 0,
            end_iter: 4,
            payloads,
        }]];
        let mut fused = TrainingState::new_group(phi, 1);
        fused[0].moment1.iter_mut().for_each(|m| *m = 0.5);
        let mut seq = fused.clone();
        fused_replay(&mut fused, &chain, &hp).unwrap();
        sequential_replay(&mut seq, &chain, &hp);
        assert!(fused[0].content_eq(&seq[0]));
        assert_eq!(fused[0].step, 5);
    }

    #[test]
    fn replay_rejects_gaps_and_bad_lengths() {
        let hp = AdamParams::default();
        let mut states = TrainingState::new_group(16, 1);
        let bad_start = vec![vec![DiffBatch {
            rank: 0,
            start_iter: 3,
            end_iter: 3,
            payloads: vec![crate::compress::CompressedPayload::RawDense {
                values: vec![0.0; 16],
            }],
        }]];
        assert!(matches!(
            fused_replay(&mut states, &bad_start, &hp),
            Err(RecoveryError::Protocol(ProtocolError::BatchGap { .. }))
        ));
        let bad_len = vec![vec![DiffBatch {
            rank: 0,
            start_iter: 0,
            end_iter: 0,
            payloads: vec![crate::compress::CompressedPayload::RawDense {
                values: vec![0.0; 4],
            }],
        }]];
        let mut states = TrainingState::new_group(16, 1);
        assert!(matches!(
            fused_replay(&mut states, &bad_len, &hp),
            Err(RecoveryError::Protocol(ProtocolError::LengthMismatch { .. }))
        ));
    }

    #[test]
    fn lossless_replay_reproduces_live_training() {
        // Replaying exact gradients equals having trained through them.
        let phi = 96;
        let dp = 2;
        let hp = AdamParams::default();
        let w = crate::state::Workload::from_seed(5, phi, 2, 0.01);
        let mut live = TrainingState::new_group(phi, dp);
        let mut batches: Vec<Vec<DiffBatch>> = vec![Vec::new(); dp];
        let mut open: Vec<Vec<Vec<f32>>> = vec![Vec::new(); dp];
        for it in 0..20u64 {
            let (full, _) = w.eval(it, &live[0].fp16_weights);
            for rank in 0..dp {
                open[rank].push(shard_of(&full, &live[rank], it).values);
            }
            native_step(&mut live, &full, &hp).unwrap();
            if open[0].len() == 5 {
                for (rank, grads) in open.iter_mut().enumerate() {
                    batches[rank].push(DiffBatch {
                        rank,
                        start_iter: it - 4,
                        end_iter: it,
                        payloads: grads
                            .drain(..)
                            .map(|values| crate::compress::CompressedPayload::RawDense { values })
                            .collect(),
                    });
                }
            }
        }
        let mut recovered = TrainingState::new_group(phi, dp);
        fused_replay(&mut recovered, &batches, &hp).unwrap();
        for (a, b) in recovered.iter().zip(&live) {
            assert!(a.content_eq(b), "rank {}", a.rank);
        }
    }
}
