//! Run and recovery reports: machine-readable JSON first, with stable field
//! names so sweep aggregation is byte-deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::metrics::RecoveryBreakdown;
use crate::recovery::SourceTier;

/// Report for one recovery episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub failure_kind: String,
    pub failure_iteration: u64,
    pub anchor: u64,
    pub replay_end: u64,
    pub fallback_used: SourceTier,
    pub t_rollback_sim: f64,
    pub t_rerun_sim: f64,
    /// Bytes fetched during recovery, per source tier label.
    pub bytes_by_tier: BTreeMap<String, u64>,
    /// Watermark version at the moment of the failure.
    pub watermark_at_failure: u64,
    /// Content hash of each rank's state right after replay finished.
    pub post_state_hashes: Vec<u64>,
}

/// Outcome of the per-run invariant suite; every flag is derived from
/// logged checks (see `safety`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceFlags {
    pub recovered_at_or_above_watermark: bool,
    pub no_uncommitted_tier3_reads: bool,
    pub no_reclaimed_object_fetches: bool,
    pub watermark_monotonic: bool,
    pub catalog_faithful: bool,
}

impl AcceptanceFlags {
    pub fn all_pass(&self) -> bool {
        self.recovered_at_or_above_watermark
            && self.no_uncommitted_tier3_reads
            && self.no_reclaimed_object_fetches
            && self.watermark_monotonic
            && self.catalog_faithful
    }
}

/// Top-level report for one scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_id: String,
    pub seed: u64,
    pub iterations: u64,
    pub final_loss: f64,
    pub total_stall: f64,
    pub sim_time: f64,
    pub tier2_enabled: bool,
    pub recoveries: Vec<RecoveryReport>,
    pub recovery_breakdowns: Vec<RecoveryBreakdown>,
    pub link_bytes: BTreeMap<String, u64>,
    pub acceptance: AcceptanceFlags,
    /// Violations found by the invariant suite, empty when all flags pass.
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Aggregate over a sweep of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub scenario_id: String,
    pub seeds: u64,
    pub runs_passed: u64,
    pub runs_failed: u64,
    pub failures_injected: u64,
    pub recoveries: u64,
    pub violations: Vec<String>,
}

impl SweepReport {
    pub fn all_pass(&self) -> bool {
        self.runs_failed == 0 && self.violations.is_empty()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
