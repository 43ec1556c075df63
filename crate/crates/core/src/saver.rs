//! Per-rank checkpoint production: compressed gradient payloads accumulate
//! into differential batches every iteration, and base checkpoints are
//! intercepted in memory once per interval, then drained to the peer in
//! paced micro-chunks and to Tier-3 in the background.

use crate::compress::{self, CompressConfig, CompressedPayload};
use crate::error::{ConfigError, ProtocolError};
use crate::rng::mix_seed;
use crate::state::TrainingState;
use crate::tier::{BaseShard, DiffBatch, Version};
use crate::topology::RankId;

/// Schedule for replicating one base checkpoint to the peer without stalling
/// training: the payload is spread evenly over the iterations left in the
/// base interval after a safety margin, with a hard cap on chunk size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkPlan {
    pub total_bytes: u64,
    pub interval_iters: u64,
    pub safety_margin_iters: u64,
    pub chunk_cap_bytes: u64,
    pub chunk_bytes: u64,
    pub iters_scheduled: u64,
    /// Set when the schedule extends past the pre-margin window; such plans
    /// may run into the next base generation and require a sync flush.
    pub spillover: bool,
}

/// Computes the chunk schedule:
/// `chunk = min(cap, ceil(total / max(1, interval - margin)))`.
pub fn plan_chunks(
    total_bytes: u64,
    interval_iters: u64,
    safety_margin_iters: u64,
    chunk_cap_bytes: u64,
) -> ChunkPlan {
    assert!(interval_iters >= 1, "base interval must be >= 1");
    let window = interval_iters.saturating_sub(safety_margin_iters).max(1);
    let even = total_bytes.div_ceil(window);
    let chunk_bytes = even.min(chunk_cap_bytes);
    let iters_scheduled = if total_bytes == 0 {
        0
    } else {
        total_bytes.div_ceil(chunk_bytes)
    };
    ChunkPlan {
        total_bytes,
        interval_iters,
        safety_margin_iters,
        chunk_cap_bytes,
        chunk_bytes,
        iters_scheduled,
        spillover: iters_scheduled > interval_iters.saturating_sub(safety_margin_iters),
    }
}

/// Saving-path configuration for one run.
#[derive(Debug, Clone)]
pub struct SaverConfig {
    /// Differential batching length N.
    pub batch_len: u64,
    /// Base checkpoint interval I.
    pub base_interval: u64,
    /// Safety margin s reserved at the end of each interval.
    pub safety_margin: u64,
    /// Chunk cap C for Tier-2 base replication.
    pub chunk_cap_bytes: u64,
    pub compress: CompressConfig,
    /// Bypass lossy compression; payloads keep exact f32 gradients.
    pub lossless: bool,
    pub seed: u64,
}

impl SaverConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_len == 0 {
            return Err(ConfigError::new("checkpoint.batch_len", "must be >= 1"));
        }
        if self.base_interval == 0 {
            return Err(ConfigError::new("checkpoint.base_interval", "must be >= 1"));
        }
        if self.base_interval % self.batch_len != 0 {
            return Err(ConfigError::new(
                "checkpoint.batch_len",
                "must divide the base interval so replay chains align with anchors",
            ));
        }
        if self.chunk_cap_bytes == 0 {
            return Err(ConfigError::new("checkpoint.chunk_cap_bytes", "must be >= 1"));
        }
        self.compress.validate()?;
        Ok(())
    }

    /// Default safety margin: a tenth of the interval, rounded up.
    pub fn default_safety_margin(interval: u64) -> u64 {
        interval.div_ceil(10)
    }
}

/// Replication progress for the most recent base checkpoint.
#[derive(Debug, Clone)]
pub struct ActiveReplication {
    pub version: Version,
    pub plan: ChunkPlan,
    pub bytes_emitted: u64,
    pub failed: bool,
}

impl ActiveReplication {
    pub fn remaining(&self) -> u64 {
        self.plan.total_bytes - self.bytes_emitted
    }

    pub fn complete(&self) -> bool {
        self.bytes_emitted >= self.plan.total_bytes
    }
}

/// Per-rank saver state.
#[derive(Debug)]
pub struct RankSaver {
    pub rank: RankId,
    cfg: SaverConfig,
    open_payloads: Vec<CompressedPayload>,
    open_start: u64,
    last_sealed_end: Option<u64>,
    replication: Option<ActiveReplication>,
}

impl RankSaver {
    pub fn new(rank: RankId, cfg: SaverConfig) -> Self {
        Self {
            rank,
            cfg,
            open_payloads: Vec::new(),
            open_start: 0,
            last_sealed_end: None,
            replication: None,
        }
    }

    pub fn config(&self) -> &SaverConfig {
        &self.cfg
    }

    /// Appends this iteration's compressed gradient to the open batch and
    /// seals the batch once N payloads have accumulated.
    pub fn on_iteration(&mut self, iteration: u64, grad_slice: &[f32]) -> Option<DiffBatch> {
        if self.open_payloads.is_empty() {
            self.open_start = iteration;
        }
        debug_assert_eq!(
            iteration,
            self.open_start + self.open_payloads.len() as u64,
            "iterations must arrive contiguously"
        );
        let payload = if self.cfg.lossless {
            CompressedPayload::RawDense {
                values: grad_slice.to_vec(),
            }
        } else {
            let seed = mix_seed(self.cfg.seed, self.rank as u64 + 1, iteration);
            compress::compress(grad_slice, seed, &self.cfg.compress)
        };
        self.open_payloads.push(payload);
        if self.open_payloads.len() as u64 == self.cfg.batch_len {
            let batch = DiffBatch {
                rank: self.rank,
                start_iter: self.open_start,
                end_iter: iteration,
                payloads: std::mem::take(&mut self.open_payloads),
            };
            debug_assert!(batch.validate().is_ok());
            // Sealed batches tile the iteration axis with no gaps.
            if let Some(prev) = self.last_sealed_end {
                debug_assert_eq!(batch.start_iter, prev + 1, "diff coverage gap");
            }
            self.last_sealed_end = Some(batch.end_iter);
            self.open_start = iteration + 1;
            return Some(batch);
        }
        None
    }

    /// Serializes the rank's shard exactly once; the returned single buffer
    /// is shared by the Tier-1 store, the peer chunk scheduler, and the
    /// Tier-3 uploader.
    pub fn intercept_base(
        &self,
        state: &TrainingState,
        version: Version,
    ) -> Result<BaseShard, ProtocolError> {
        if version.0 % self.cfg.base_interval != 0 {
            return Err(ProtocolError::BatchGap {
                expected: version.0 / self.cfg.base_interval * self.cfg.base_interval,
                actual: version.0,
            });
        }
        if version.0 != state.step {
            return Err(ProtocolError::StepMismatch {
                expected: state.step,
                rank: self.rank,
                actual: version.0,
            });
        }
        let bytes = state.to_shard().encode();
        Ok(BaseShard {
            version,
            rank: self.rank,
            payload: bytes.into(),
        })
    }

    /// Starts the paced replication of a freshly generated base checkpoint.
    /// `volume` is the bilateral maximum agreed in the size exchange.
    pub fn begin_replication(&mut self, version: Version, volume: u64) {
        self.replication = Some(ActiveReplication {
            version,
            plan: plan_chunks(
                volume,
                self.cfg.base_interval,
                self.cfg.safety_margin,
                self.cfg.chunk_cap_bytes,
            ),
            bytes_emitted: 0,
            failed: false,
        });
    }

    /// Emits this iteration's micro-chunk, if the active plan has bytes left.
    pub fn next_chunk(&mut self) -> Option<(Version, u64)> {
        let rep = self.replication.as_mut()?;
        if rep.failed || rep.complete() {
            return None;
        }
        let chunk = rep.plan.chunk_bytes.min(rep.remaining());
        rep.bytes_emitted += chunk;
        Some((rep.version, chunk))
    }

    /// Drains the whole remainder at once (the sync-flush path). Returns the
    /// flushed byte count, zero if nothing was pending.
    pub fn flush_remaining(&mut self) -> Option<(Version, u64)> {
        let rep = self.replication.as_mut()?;
        if rep.failed || rep.complete() {
            return None;
        }
        let remaining = rep.remaining();
        rep.bytes_emitted = rep.plan.total_bytes;
        Some((rep.version, remaining))
    }

    pub fn replication(&self) -> Option<&ActiveReplication> {
        self.replication.as_ref()
    }

    /// Marks the current plan failed (peer unavailable). No retry within the
    /// version; the replica simply stays absent from Tier-2.
    pub fn fail_replication(&mut self) {
        if let Some(rep) = self.replication.as_mut() {
            rep.failed = true;
        }
    }

    pub fn clear_replication(&mut self) {
        self.replication = None;
    }

    /// Resets the open accumulator after a process restart or recovery.
    pub fn reset_open(&mut self, next_iteration: u64) {
        self.open_payloads.clear();
        self.open_start = next_iteration;
        self.last_sealed_end = next_iteration.checked_sub(1);
        self.replication = None;
    }
}
