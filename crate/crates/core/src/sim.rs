//! Deterministic discrete-event cluster simulation: virtual clock, training
//! loop driver, per-link bandwidth queues, failure injection, and the
//! recovery driver. Everything is a pure function of (config, seed); event
//! logs from two runs with the same inputs are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::config::{FailureEvent, FailureKind, ScenarioConfig};
use crate::error::{ConfigError, RecoveryError, StepError, StoreError};
use crate::events::{Event, EventLog, ObjectClass, WatermarkRecord};
use crate::metrics::{IterationSample, Metrics, RecoveryBreakdown};
use crate::recovery::{
    consensus, fused_replay, plan_loading, RankView, RecoveryPlan, SourceTier,
};
use crate::reclaim::{advance_watermark, committed_map, naive_reclaim, reclaim, Watermark};
use crate::report::{AcceptanceFlags, RecoveryReport, RunReport};
use crate::saver::RankSaver;
use crate::state::{native_step, shard_of, states_from_shards, StateShard, TrainingState, Workload};
use crate::tier::{
    Cluster, CommitTarget, DiffBatch, DiffRange, ObjectKey, Payload, Tier, Tier3Store, Version,
};
use crate::topology::{NodeId, PeerMap, RankId, Topology};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Protocol(#[from] crate::error::ProtocolError),
}

/// FIFO bandwidth queue for one link.
#[derive(Debug, Clone)]
struct LinkQueue {
    bw: f64,
    busy_until: f64,
}

impl LinkQueue {
    fn new(bw: f64) -> Self {
        Self {
            bw,
            busy_until: 0.0,
        }
    }

    /// Enqueues a transfer at `now`; returns its completion time.
    fn enqueue(&mut self, now: f64, bytes: u64) -> f64 {
        let start = self.busy_until.max(now);
        let end = start + bytes as f64 / self.bw;
        self.busy_until = end;
        end
    }

    fn cancel_all(&mut self, now: f64) {
        self.busy_until = now;
    }
}

#[derive(Debug, Clone)]
enum TransferKind {
    /// One micro-chunk of a base replica heading to the peer.
    BaseChunk {
        rank: RankId,
        version: Version,
        bytes: u64,
    },
    /// A whole differential batch replica.
    DiffReplica {
        key: ObjectKey,
        payload: Payload,
        host: NodeId,
    },
    /// Background upload to Tier-3; bytes were staged at enqueue time.
    Tier3Upload { key: ObjectKey, bytes: u64 },
}

#[derive(Debug, Clone)]
struct PendingTransfer {
    end: f64,
    seq: u64,
    what: TransferKind,
}

/// Base replica being accumulated at the peer; becomes visible all-or-nothing.
#[derive(Debug, Clone)]
struct InflightReplica {
    total: u64,
    arrived: u64,
    payload: Payload,
    host: NodeId,
}

/// Full outcome of one simulated run.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub metrics: Metrics,
    pub events: EventLog,
    pub watermark_trace: Vec<WatermarkRecord>,
    pub final_states: Vec<TrainingState>,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    topo: Topology,
    peers: Option<PeerMap>,
    workload: Workload,
    clock: f64,
    states: Vec<TrainingState>,
    cluster: Cluster,
    savers: Vec<RankSaver>,
    t2_links: Vec<LinkQueue>,
    t3_links: Vec<LinkQueue>,
    pending: Vec<PendingTransfer>,
    seq: u64,
    inflight: BTreeMap<(RankId, Version), InflightReplica>,
    awaiting_commit: std::collections::BTreeSet<CommitTarget>,
    watermark: Watermark,
    events: EventLog,
    wm_trace: Vec<WatermarkRecord>,
    metrics: Metrics,
    recoveries: Vec<RecoveryReport>,
    failures: BTreeMap<u64, FailureEvent>,
    iteration_stall: f64,
    warnings: Vec<String>,
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig, tier3_root: &Path) -> Result<Self, SimError> {
        cfg.validate()?;
        let topo = cfg.build_topology()?;
        let peers = PeerMap::build(&topo);
        let mut warnings = Vec::new();
        if peers.is_none() {
            warnings.push(
                "single-node rack: Tier-2 peer replication is DISABLED; node failures fall \
                 back to Tier-3"
                    .to_string(),
            );
        }
        let dp = topo.num_ranks();
        let workload = Workload::from_seed(
            cfg.model.seed,
            cfg.model.phi,
            cfg.model.batch_samples,
            cfg.model.noise_std,
        );
        let states = TrainingState::new_group(cfg.model.phi, dp);
        let savers = (0..dp)
            .map(|rank| RankSaver::new(rank, cfg.saver_config()))
            .collect();
        let cluster = Cluster::new(topo.num_nodes(), Tier3Store::open(tier3_root)?);
        let mut failures = BTreeMap::new();
        for f in &cfg.failures {
            if failures.insert(f.at_iteration, *f).is_some() {
                return Err(ConfigError::new(
                    "failures",
                    format!("duplicate failure at iteration {}", f.at_iteration),
                )
                .into());
            }
            if f.at_iteration == 0 {
                return Err(ConfigError::new(
                    "failures",
                    "failures must be scheduled at iteration >= 1",
                )
                .into());
            }
        }
        let t2_links = (0..topo.num_nodes())
            .map(|_| LinkQueue::new(topo.links.intra_rack_bw))
            .collect();
        let t3_links = (0..topo.num_nodes())
            .map(|_| LinkQueue::new(topo.links.tier3_bw))
            .collect();
        Ok(Self {
            topo,
            peers,
            workload,
            clock: 0.0,
            states,
            cluster,
            savers,
            t2_links,
            t3_links,
            pending: Vec::new(),
            seq: 0,
            inflight: BTreeMap::new(),
            awaiting_commit: std::collections::BTreeSet::new(),
            watermark: Watermark::initial(),
            events: EventLog::new(),
            wm_trace: Vec::new(),
            metrics: Metrics::default(),
            recoveries: Vec::new(),
            failures,
            iteration_stall: 0.0,
            warnings,
            cfg,
        })
    }

    pub fn step(&self) -> u64 {
        self.states[0].step
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    /// Runs the full scenario to its configured iteration count.
    pub fn run(mut self) -> Result<RunOutcome, SimError> {
        while self.step() < self.cfg.run.iterations {
            self.iteration()?;
        }
        Ok(self.finish())
    }

    fn finish(mut self) -> RunOutcome {
        let catalog_faithful = self.cluster.catalog() == &self.cluster.rebuild_catalog();
        let findings = crate::safety::check_run(
            self.events.events(),
            &self.wm_trace,
            &self.recoveries,
            catalog_faithful,
        );
        self.metrics.final_loss = self
            .metrics
            .samples
            .last()
            .map(|s| s.loss)
            .unwrap_or(f64::NAN);
        let report = RunReport {
            scenario_id: format!(
                "phi{}_dp{}_i{}_n{}",
                self.cfg.model.phi,
                self.topo.num_ranks(),
                self.cfg.checkpoint.base_interval,
                self.cfg.checkpoint.batch_len
            ),
            seed: self.cfg.model.seed,
            iterations: self.cfg.run.iterations,
            final_loss: self.metrics.final_loss,
            total_stall: self.metrics.total_stall,
            sim_time: self.clock,
            tier2_enabled: self.peers.is_some(),
            recoveries: self.recoveries.clone(),
            recovery_breakdowns: self.metrics.recoveries.clone(),
            link_bytes: self.metrics.link_bytes.clone(),
            acceptance: findings.flags,
            violations: findings.violations,
            warnings: self.warnings.clone(),
        };
        RunOutcome {
            report,
            metrics: self.metrics,
            events: self.events,
            watermark_trace: self.wm_trace,
            final_states: self.states,
        }
    }

    fn iteration(&mut self) -> Result<(), SimError> {
        let iter = self.step();
        if let Some(failure) = self.failures.remove(&iter) {
            self.inject_and_recover(failure)?;
            return Ok(());
        }
        self.iteration_stall = 0.0;
        if iter % self.cfg.checkpoint.base_interval == 0 {
            self.base_checkpoint(Version(iter))?;
        }

        // Train: one shared gradient, per-rank updates, weight broadcast.
        let (full_grad, loss) = self.workload.eval(iter, &self.states[0].fp16_weights);
        native_step(&mut self.states, &full_grad, &self.cfg.optimizer)?;
        self.clock += self.cfg.run.compute_time;

        // Differential stream.
        for rank in 0..self.states.len() {
            let slice = shard_of(&full_grad, &self.states[rank], iter);
            if let Some(batch) = self.savers[rank].on_iteration(iter, &slice.values) {
                self.store_diff_batch(batch)?;
            }
        }

        // Paced base replication chunks.
        self.pump_replication();

        self.drain_completions()?;
        self.coordinate()?;
        self.sample(iter, loss);
        Ok(())
    }

    /// Base-checkpoint generation: flush any straggling replication, then
    /// intercept each rank's shard once and fan it out to all three tiers.
    fn base_checkpoint(&mut self, version: Version) -> Result<(), SimError> {
        self.flush_pending_replication(version)?;

        let mut shards = Vec::with_capacity(self.states.len());
        for rank in 0..self.states.len() {
            let shard = self.savers[rank].intercept_base(&self.states[rank], version)?;
            shards.push(shard);
        }
        let sizes: Vec<u64> = shards.iter().map(|s| s.size()).collect();
        for shard in shards {
            let rank = shard.rank;
            let home = self.topo.node_of_rank(rank);
            let key = shard.key();
            self.cluster.put_tier1(home, key, shard.payload.clone())?;
            self.log_put(rank, Tier::Tier1, &key, shard.size());

            // Background migration to Tier-3.
            self.cluster.tier3_stage(&key, &shard.payload)?;
            let end = self.t3_links[home].enqueue(self.clock, shard.size());
            self.push_transfer(
                end,
                TransferKind::Tier3Upload {
                    key,
                    bytes: shard.size(),
                },
            );
            self.metrics
                .record_link(format!("t3:{home}"), shard.size());

            // Peer replication: exchange sizes, then pace the larger volume.
            if let Some(peers) = &self.peers {
                let partner = peers.peer_rank(rank);
                let volume = sizes[rank].max(sizes[partner]);
                let host = peers.peer_node(rank);
                self.savers[rank].begin_replication(version, volume);
                self.inflight.insert(
                    (rank, version),
                    InflightReplica {
                        total: volume,
                        arrived: 0,
                        payload: shard.payload.clone(),
                        host,
                    },
                );
            }
        }

        if self.cfg.run.naive_reclaim {
            let peers = self.peers.clone();
            for rank in 0..self.states.len() {
                let deleted =
                    naive_reclaim(&mut self.cluster, &self.topo, peers.as_ref(), rank, version);
                for (tier, key) in deleted {
                    self.events.push(Event::ReclaimDelete {
                        t: self.clock,
                        rank,
                        tier,
                        object: key.label(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Synchronously drains any replication plan that would collide with the
    /// incoming base generation; the stall is charged to the foreground.
    fn flush_pending_replication(&mut self, next_version: Version) -> Result<(), SimError> {
        let before = self.clock;
        let mut latest = self.clock;
        for rank in 0..self.savers.len() {
            let Some((version, remaining)) = self.savers[rank].flush_remaining() else {
                continue;
            };
            if remaining == 0 {
                continue;
            }
            let home = self.topo.node_of_rank(rank);
            let end = self.t2_links[home].enqueue(before, remaining);
            self.push_transfer(
                end,
                TransferKind::BaseChunk {
                    rank,
                    version,
                    bytes: remaining,
                },
            );
            self.metrics.record_link(format!("t2:{home}"), remaining);
            self.events.push(Event::SyncFlush {
                t: before,
                rank,
                bytes: remaining,
                version: version.0,
            });
            let stall = (end - before).max(0.0);
            self.events.push(Event::Stall {
                t: before,
                rank,
                seconds: stall,
                version: next_version.0,
            });
            latest = latest.max(end);
        }
        if latest > self.clock {
            self.iteration_stall += latest - self.clock;
            self.metrics.total_stall += latest - self.clock;
            self.clock = latest;
            // The replicas must be whole before the buffers are reused.
            self.drain_completions()?;
        }
        Ok(())
    }

    fn pump_replication(&mut self) {
        for rank in 0..self.savers.len() {
            let Some((version, bytes)) = self.savers[rank].next_chunk() else {
                continue;
            };
            let home = self.topo.node_of_rank(rank);
            let end = self.t2_links[home].enqueue(self.clock, bytes);
            self.push_transfer(end, TransferKind::BaseChunk { rank, version, bytes });
            self.metrics.record_link(format!("t2:{home}"), bytes);
            self.events.push(Event::Chunk {
                t: self.clock,
                rank,
                bytes,
                version: version.0,
            });
        }
    }

    fn store_diff_batch(&mut self, batch: DiffBatch) -> Result<(), SimError> {
        let rank = batch.rank;
        let home = self.topo.node_of_rank(rank);
        let key = batch.key();
        let bytes: Payload = batch.encode().into();
        let size = bytes.len() as u64;
        self.cluster.put_tier1(home, key, bytes.clone())?;
        self.events.push(Event::DiffSeal {
            t: self.clock,
            rank,
            bytes: size,
            version: batch.end_iter,
        });
        self.log_put(rank, Tier::Tier1, &key, size);

        if let Some(peers) = &self.peers {
            let host = peers.peer_node(rank);
            let end = self.t2_links[home].enqueue(self.clock, size);
            self.push_transfer(
                end,
                TransferKind::DiffReplica {
                    key,
                    payload: bytes.clone(),
                    host,
                },
            );
            self.metrics.record_link(format!("t2:{home}"), size);
        }

        self.cluster.tier3_stage(&key, &bytes)?;
        let end = self.t3_links[home].enqueue(self.clock, size);
        self.push_transfer(end, TransferKind::Tier3Upload { key, bytes: size });
        self.metrics.record_link(format!("t3:{home}"), size);
        Ok(())
    }

    fn push_transfer(&mut self, end: f64, what: TransferKind) {
        self.pending.push(PendingTransfer {
            end,
            seq: self.seq,
            what,
        });
        self.seq += 1;
    }

    /// Applies every background completion due by the current clock, in
    /// completion order.
    fn drain_completions(&mut self) -> Result<(), SimError> {
        loop {
            let Some(idx) = self
                .pending
                .iter()
                .enumerate()
                .filter(|(_, p)| p.end <= self.clock)
                .min_by(|(_, a), (_, b)| {
                    a.end
                        .partial_cmp(&b.end)
                        .unwrap()
                        .then(a.seq.cmp(&b.seq))
                })
                .map(|(i, _)| i)
            else {
                return Ok(());
            };
            let transfer = self.pending.swap_remove(idx);
            match transfer.what {
                TransferKind::BaseChunk {
                    rank,
                    version,
                    bytes,
                } => {
                    if let Some(rep) = self.inflight.get_mut(&(rank, version)) {
                        rep.arrived += bytes;
                        if rep.arrived >= rep.total {
                            let rep = self.inflight.remove(&(rank, version)).unwrap();
                            if self.cluster.nodes[rep.host].alive {
                                let key = ObjectKey::Base { rank, version };
                                self.cluster.put_tier2(rep.host, key, rep.payload.clone())?;
                                self.log_put(rank, Tier::Tier2, &key, rep.payload.len() as u64);
                            }
                        }
                    }
                }
                TransferKind::DiffReplica { key, payload, host } => {
                    if self.cluster.nodes[host].alive {
                        let size = payload.len() as u64;
                        self.cluster.put_tier2(host, key, payload)?;
                        self.log_put(key.rank(), Tier::Tier2, &key, size);
                    }
                }
                TransferKind::Tier3Upload { key, bytes } => {
                    self.cluster.tier3_finalize(&key)?;
                    let (version, object, start) = describe(&key);
                    self.events.push(Event::T3Upload {
                        t: transfer.end,
                        rank: key.rank(),
                        bytes,
                        version,
                        object,
                        start,
                    });
                    self.awaiting_commit.insert(match key {
                        ObjectKey::Base { version, .. } => CommitTarget::Base(version),
                        ObjectKey::Diff { range, .. } => CommitTarget::Diff(range),
                    });
                }
            }
        }
    }

    /// Coordinator duties, run once per iteration: publish commit markers for
    /// complete upload sets, advance the watermark, broadcast it, and let
    /// every rank reclaim.
    fn coordinate(&mut self) -> Result<(), SimError> {
        let expected = self.states.len();
        let ready: Vec<CommitTarget> = self.awaiting_commit.iter().copied().collect();
        for target in ready {
            let already = match target {
                CommitTarget::Base(v) => {
                    self.cluster.catalog().tier3_committed_bases.contains(&v)
                }
                CommitTarget::Diff(r) => {
                    self.cluster.catalog().tier3_committed_diffs.contains(&r)
                }
            };
            if already {
                self.awaiting_commit.remove(&target);
                continue;
            }
            match self.cluster.tier3_commit(target, expected)? {
                crate::tier::CommitOutcome::Committed => {
                    self.awaiting_commit.remove(&target);
                    let (version, object, start) = match target {
                        CommitTarget::Base(v) => (v.0, ObjectClass::Base, None),
                        CommitTarget::Diff(r) => (r.end, ObjectClass::Diff, Some(r.start)),
                    };
                    self.events.push(Event::T3Commit {
                        t: self.clock,
                        rank: 0,
                        bytes: self.commit_bytes(target),
                        version,
                        object,
                        start,
                    });
                }
                crate::tier::CommitOutcome::Pending => {}
            }
        }

        if let Some(new_wm) = advance_watermark(
            &self.watermark,
            &self.cluster.catalog().tier3_committed_bases,
            self.clock,
        ) {
            self.watermark = new_wm;
            self.wm_trace.push(WatermarkRecord {
                t: self.clock,
                w: new_wm.version.0,
                committed_map: committed_map(self.cluster.catalog(), &self.topo),
            });
            if !self.cfg.run.naive_reclaim {
                let peers = self.peers.clone();
                for rank in 0..self.states.len() {
                    let deleted = reclaim(
                        &mut self.cluster,
                        &self.topo,
                        peers.as_ref(),
                        rank,
                        new_wm.version,
                        self.cfg.checkpoint.base_interval,
                    );
                    for (tier, key) in deleted {
                        self.events.push(Event::ReclaimDelete {
                            t: self.clock,
                            rank,
                            tier,
                            object: key.label(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn commit_bytes(&self, target: CommitTarget) -> u64 {
        (0..self.states.len())
            .map(|rank| {
                let key = match target {
                    CommitTarget::Base(version) => ObjectKey::Base { rank, version },
                    CommitTarget::Diff(range) => ObjectKey::Diff { rank, range },
                };
                self.cluster.tier3.get(&key).map(|b| b.len() as u64).unwrap_or(0)
            })
            .sum()
    }

    fn log_put(&mut self, rank: RankId, tier: Tier, key: &ObjectKey, bytes: u64) {
        self.events.push(Event::Put {
            t: self.clock,
            rank,
            tier,
            object: key.label(),
            bytes,
        });
    }

    fn sample(&mut self, iteration: u64, loss: f64) {
        let ranks = self.states.len();
        let mut per_rank = Vec::with_capacity(ranks * 3);
        for rank in 0..ranks {
            for tier in [Tier::Tier1, Tier::Tier2, Tier::Tier3] {
                per_rank.push(self.cluster.bytes_for(rank, tier));
            }
        }
        self.metrics.samples.push(IterationSample {
            iteration,
            t: self.clock,
            loss,
            stall: self.iteration_stall,
            tier1_bytes: self.cluster.tier_bytes_total(Tier::Tier1),
            tier2_bytes: self.cluster.tier_bytes_total(Tier::Tier2),
            tier3_bytes: self.cluster.tier_bytes_total(Tier::Tier3),
            per_rank_bytes: per_rank,
        });
    }

    /// Applies a failure: every failure kills the training processes (open
    /// accumulators and in-flight transfers are lost); node and rack
    /// failures additionally wipe volatile storage. Nodes come back empty.
    fn inject_and_recover(&mut self, failure: FailureEvent) -> Result<(), SimError> {
        let iter = self.step();
        self.events.push(Event::Failure {
            t: self.clock,
            iteration: iter,
            failure: failure.kind.label().to_string(),
        });
        let w_at_failure = self.watermark.version;

        self.pending.clear();
        self.inflight.clear();
        for link in self.t2_links.iter_mut().chain(self.t3_links.iter_mut()) {
            link.cancel_all(self.clock);
        }
        for saver in &mut self.savers {
            saver.clear_replication();
        }
        match failure.kind {
            FailureKind::Software => {}
            FailureKind::Node { node, .. } => {
                self.cluster.wipe_node(node);
            }
            FailureKind::Rack { rack } => {
                self.cluster.wipe_rack(rack, &self.topo);
            }
        }
        for node in 0..self.topo.num_nodes() {
            self.cluster.revive_node(node);
        }
        self.recover(failure, iter, w_at_failure)
    }

    fn recover(
        &mut self,
        failure: FailureEvent,
        fail_iter: u64,
        w_at_failure: Version,
    ) -> Result<(), SimError> {
        self.events.push(Event::RecoveryStart {
            t: self.clock,
            iteration: fail_iter,
        });
        let n = self.cfg.checkpoint.batch_len;
        let views = self.collect_views();
        let (anchor, replay_end) = consensus(&views, n)?;
        let mut plan = plan_loading(anchor, replay_end, &views, &self.topo, n)?;

        // Sequential probing down the cascade to the deepest tier in use.
        let lat = self.topo.links.probe_latency;
        let depth = match plan.fallback_used {
            SourceTier::Tier1 => 1,
            SourceTier::Tier2 => 2,
            SourceTier::ClusterPeer | SourceTier::Tier3 => 3,
        };
        for (tier, latency) in [
            (Tier::Tier1, lat.tier1),
            (Tier::Tier2, lat.tier2),
            (Tier::Tier3, lat.tier3),
        ]
        .into_iter()
        .take(depth)
        {
            self.events.push(Event::Probe {
                t: self.clock,
                tier,
                latency,
            });
            self.clock += latency;
        }
        let probe_seconds: f64 = [lat.tier1, lat.tier2, lat.tier3][..depth].iter().sum();

        let mut bytes_by_tier: BTreeMap<String, u64> = BTreeMap::new();

        // Phase 1: anchor shards.
        let (base_payloads, base_wall) =
            self.execute_fetch_phase(&mut plan, ObjectClass::Base, &mut bytes_by_tier)?;
        self.events.push(Event::FetchPhase {
            t: self.clock,
            phase: ObjectClass::Base,
            seconds: base_wall,
        });
        self.clock += base_wall;
        let t_rollback = probe_seconds + base_wall;

        // Phase 2: differential batches.
        let (diff_payloads, diff_wall) =
            self.execute_fetch_phase(&mut plan, ObjectClass::Diff, &mut bytes_by_tier)?;
        self.events.push(Event::FetchPhase {
            t: self.clock,
            phase: ObjectClass::Diff,
            seconds: diff_wall,
        });
        self.clock += diff_wall;

        // Materialize the anchor and replay.
        let mut shards = Vec::with_capacity(base_payloads.len());
        for (rank, chain) in base_payloads.iter().enumerate() {
            let bytes = chain
                .first()
                .ok_or_else(|| StoreError::NotFound(format!("anchor shard for rank {rank}")))?;
            let shard = StateShard::decode(bytes)
                .map_err(|e| StoreError::Corruption(format!("rank {rank} anchor: {e}")))?;
            shards.push(shard);
        }
        let mut new_states =
            states_from_shards(&shards).map_err(RecoveryError::Protocol)?;

        let mut batches_per_rank: Vec<Vec<DiffBatch>> = Vec::with_capacity(new_states.len());
        for (rank, chain) in diff_payloads.into_iter().enumerate() {
            let mut batches = Vec::with_capacity(chain.len());
            for bytes in chain {
                let batch = DiffBatch::decode(&bytes)?;
                debug_assert_eq!(batch.rank, rank);
                batches.push(batch);
            }
            batches_per_rank.push(batches);
        }
        fused_replay(&mut new_states, &batches_per_rank, &self.cfg.optimizer)?;
        debug_assert_eq!(new_states[0].step, replay_end);

        let replay_iters = replay_end - anchor.0;
        let replay_seconds = if replay_iters > 0 {
            let batches = (replay_iters / n) as f64;
            batches
                * ((n - 1) as f64 * self.cfg.run.fused_step_fraction * self.cfg.run.compute_time
                    + self.cfg.run.compute_time)
        } else {
            0.0
        };
        self.events.push(Event::Replay {
            t: self.clock,
            seconds: replay_seconds,
            iterations: replay_iters,
        });
        self.clock += replay_seconds;

        let rerun_seconds = (fail_iter - replay_end) as f64 * self.cfg.run.compute_time;
        let t_rerun = diff_wall + replay_seconds + rerun_seconds;

        let post_state_hashes = new_states.iter().map(|s| s.content_hash()).collect();
        self.states = new_states;
        self.drop_stale_volatile(replay_end);
        for saver in &mut self.savers {
            saver.reset_open(replay_end);
        }

        self.events.push(Event::RecoveryDone {
            t: self.clock,
            iteration: fail_iter,
            anchor: anchor.0,
            replay_end,
            t_rollback,
            t_rerun,
        });
        self.metrics.recoveries.push(RecoveryBreakdown {
            t_rollback,
            t_rerun,
        });
        self.recoveries.push(RecoveryReport {
            failure_kind: failure.kind.label().to_string(),
            failure_iteration: fail_iter,
            anchor: anchor.0,
            replay_end,
            fallback_used: plan.fallback_used,
            t_rollback_sim: t_rollback,
            t_rerun_sim: t_rerun,
            bytes_by_tier,
            watermark_at_failure: w_at_failure.0,
            post_state_hashes,
        });
        Ok(())
    }

    fn collect_views(&self) -> Vec<RankView> {
        (0..self.states.len())
            .map(|rank| RankView::collect(rank, &self.cluster, &self.topo, self.peers.as_ref()))
            .collect()
    }

    /// Fetches one phase of the plan (anchor shards or diff chains). Source
    /// maps were planned against a snapshot; if an object vanished in the
    /// meantime the whole plan is recomputed once before giving up.
    fn execute_fetch_phase(
        &mut self,
        plan: &mut RecoveryPlan,
        phase: ObjectClass,
        bytes_by_tier: &mut BTreeMap<String, u64>,
    ) -> Result<(PhasePayloads, f64), SimError> {
        let first = self.try_fetch_phase(plan, phase);
        let fetched = match first {
            Ok(fetched) => fetched,
            Err(SimError::Store(StoreError::NotFound(_) | StoreError::Unavailable(_))) => {
                // A planned source vanished between planning and loading:
                // replan once against fresh views, then give up.
                let views = self.collect_views();
                let (anchor, replay_end) = consensus(&views, self.cfg.checkpoint.batch_len)?;
                if anchor != plan.anchor || replay_end != plan.replay_end {
                    return Err(RecoveryError::SourceVanished(format!(
                        "consensus moved from ({}, {}) during loading",
                        plan.anchor, plan.replay_end
                    ))
                    .into());
                }
                *plan = plan_loading(
                    anchor,
                    replay_end,
                    &views,
                    &self.topo,
                    self.cfg.checkpoint.batch_len,
                )?;
                self.try_fetch_phase(plan, phase).map_err(|e| match e {
                    SimError::Store(StoreError::NotFound(what)) => {
                        SimError::from(RecoveryError::SourceVanished(what))
                    }
                    other => other,
                })?
            }
            Err(e) => return Err(e),
        };
        for (label, size) in &fetched.bytes_by_tier {
            *bytes_by_tier.entry(label.clone()).or_insert(0) += size;
        }
        for event in fetched.events {
            self.events.push(event);
        }
        Ok((fetched.payloads, fetched.wall))
    }

    fn try_fetch_phase(
        &self,
        plan: &RecoveryPlan,
        phase: ObjectClass,
    ) -> Result<FetchedPhase, SimError> {
        let links = self.topo.links;
        // Wall-clock contributions: Tier-1 copies run per rank in parallel,
        // Tier-2 pulls serialize per hosting node, Tier-3 fetches serialize
        // behind one leader per node.
        let mut t1_wall: f64 = 0.0;
        let mut t2_per_host: BTreeMap<NodeId, u64> = BTreeMap::new();
        let mut t3_per_node: BTreeMap<NodeId, u64> = BTreeMap::new();
        let mut fetched = FetchedPhase::default();
        for rank_plan in &plan.per_rank {
            let rank = rank_plan.rank;
            let wanted: Vec<(ObjectKey, SourceTier)> = match phase {
                ObjectClass::Base => vec![(
                    ObjectKey::Base {
                        rank,
                        version: plan.anchor,
                    },
                    rank_plan.base_source,
                )],
                ObjectClass::Diff => rank_plan
                    .diff_sources
                    .iter()
                    .map(|(range, src)| (ObjectKey::Diff { rank, range: *range }, *src))
                    .collect(),
            };
            let mut chain = Vec::with_capacity(wanted.len());
            for (key, source) in wanted {
                let bytes = self.fetch_object(&key, source)?;
                let size = bytes.len() as u64;
                let (tier, label) = match source {
                    SourceTier::Tier1 => {
                        t1_wall = t1_wall.max(size as f64 / links.tier1_bw);
                        (Tier::Tier1, "tier1")
                    }
                    SourceTier::Tier2 => {
                        let host = self
                            .peers
                            .as_ref()
                            .map(|p| p.peer_node(rank))
                            .unwrap_or(0);
                        *t2_per_host.entry(host).or_insert(0) += size;
                        (Tier::Tier2, "tier2")
                    }
                    SourceTier::ClusterPeer | SourceTier::Tier3 => {
                        let node = self.topo.node_of_rank(rank);
                        *t3_per_node.entry(node).or_insert(0) += size;
                        (Tier::Tier3, "tier3")
                    }
                };
                *fetched.bytes_by_tier.entry(label.to_string()).or_insert(0) += size;
                fetched.events.push(Event::Fetch {
                    t: self.clock,
                    rank,
                    tier,
                    object: key.label(),
                    bytes: size,
                });
                chain.push(bytes);
            }
            fetched.payloads.push(chain);
        }
        let t2_wall = t2_per_host
            .values()
            .map(|b| *b as f64 / links.intra_rack_bw)
            .fold(0.0, f64::max);
        let t3_wall = t3_per_node
            .values()
            .map(|b| *b as f64 / links.tier3_bw)
            .fold(0.0, f64::max);
        fetched.wall = t1_wall.max(t2_wall).max(t3_wall);
        Ok(fetched)
    }

    fn fetch_object(&self, key: &ObjectKey, source: SourceTier) -> Result<Vec<u8>, SimError> {
        let rank = key.rank();
        match source {
            SourceTier::Tier1 => {
                let home = self.topo.node_of_rank(rank);
                Ok(self.cluster.nodes[home].get_tier1(key)?.to_vec())
            }
            SourceTier::Tier2 => {
                let host = self
                    .peers
                    .as_ref()
                    .ok_or_else(|| StoreError::Unavailable("tier2 disabled".into()))?
                    .peer_node(rank);
                Ok(self.cluster.nodes[host].get_tier2(key)?.to_vec())
            }
            SourceTier::Tier3 => {
                let committed = match key {
                    ObjectKey::Base { version, .. } => self
                        .cluster
                        .catalog()
                        .tier3_committed_bases
                        .contains(version),
                    ObjectKey::Diff { range, .. } => self
                        .cluster
                        .catalog()
                        .tier3_committed_diffs
                        .contains(range),
                };
                if !committed {
                    return Err(StoreError::NotFound(format!(
                        "{} is not committed",
                        key.label()
                    ))
                    .into());
                }
                Ok(self.cluster.tier3.get(key)?)
            }
            SourceTier::ClusterPeer => Err(StoreError::Unavailable(
                "cluster peers only serve replicated weight slices".into(),
            )
            .into()),
        }
    }

    /// Volatile objects describing iterations past the resumption point come
    /// from the abandoned trajectory; re-execution will rewrite them. Drop
    /// them so catalogs never advertise data the run has rolled back over.
    fn drop_stale_volatile(&mut self, replay_end: u64) {
        for node in 0..self.cluster.nodes.len() {
            let stale1: Vec<ObjectKey> = self.cluster.nodes[node]
                .tier1_keys()
                .filter(|k| is_stale(k, replay_end))
                .copied()
                .collect();
            for key in stale1 {
                self.cluster.delete_tier1(node, &key);
            }
            let stale2: Vec<ObjectKey> = self.cluster.nodes[node]
                .tier2_keys()
                .filter(|k| is_stale(k, replay_end))
                .copied()
                .collect();
            for key in stale2 {
                self.cluster.delete_tier2(node, &key);
            }
        }
    }
}

type PhasePayloads = Vec<Vec<Vec<u8>>>;

#[derive(Default)]
struct FetchedPhase {
    payloads: PhasePayloads,
    wall: f64,
    bytes_by_tier: BTreeMap<String, u64>,
    events: Vec<Event>,
}

fn is_stale(key: &ObjectKey, replay_end: u64) -> bool {
    match key {
        ObjectKey::Base { version, .. } => version.0 > replay_end,
        ObjectKey::Diff { range, .. } => range.end >= replay_end,
    }
}

fn describe(key: &ObjectKey) -> (u64, ObjectClass, Option<u64>) {
    match key {
        ObjectKey::Base { version, .. } => (version.0, ObjectClass::Base, None),
        ObjectKey::Diff { range, .. } => (range.end, ObjectClass::Diff, Some(range.start)),
    }
}

/// Recovers the rollback/rerun split from the event log alone:
/// rollback = probes + anchor fetch wall; rerun = diff fetch wall + replay
/// time + re-executed iterations past the replay boundary.
pub fn measure_recovery(events: &[Event], compute_time: f64) -> Vec<RecoveryBreakdown> {
    let mut out = Vec::new();
    let mut probes = 0.0;
    let mut base_wall = 0.0;
    let mut diff_wall = 0.0;
    let mut replay = 0.0;
    for e in events {
        match e {
            Event::RecoveryStart { .. } => {
                probes = 0.0;
                base_wall = 0.0;
                diff_wall = 0.0;
                replay = 0.0;
            }
            Event::Probe { latency, .. } => probes += latency,
            Event::FetchPhase { phase, seconds, .. } => match phase {
                ObjectClass::Base => base_wall += seconds,
                ObjectClass::Diff => diff_wall += seconds,
            },
            Event::Replay { seconds, .. } => replay += seconds,
            Event::RecoveryDone {
                iteration,
                replay_end,
                ..
            } => {
                out.push(RecoveryBreakdown {
                    t_rollback: probes + base_wall,
                    t_rerun: diff_wall + replay + (iteration - replay_end) as f64 * compute_time,
                });
            }
            _ => {}
        }
    }
    out
}

/// Convenience: run a scenario against a fresh Tier-3 root.
pub fn run_scenario(cfg: ScenarioConfig, tier3_root: &Path) -> Result<RunOutcome, SimError> {
    Simulation::new(cfg, tier3_root)?.run()
}
