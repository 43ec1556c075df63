//! Run metrics: per-iteration stall and footprint series, recovery time
//! breakdowns, and bytes moved per link.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::tier::Tier;
use crate::topology::RankId;

/// One sampled iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSample {
    pub iteration: u64,
    pub t: f64,
    pub loss: f64,
    /// Foreground stall charged to this iteration (sync flushes, restarts).
    pub stall: f64,
    pub tier1_bytes: u64,
    pub tier2_bytes: u64,
    pub tier3_bytes: u64,
    /// Per-(rank, tier) footprint, indexed `rank * 3 + tier`.
    pub per_rank_bytes: Vec<u64>,
}

/// Recovery time split: rollback loads the anchor, rerun covers diff fetch,
/// replay, and re-executed iterations past the replay boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryBreakdown {
    pub t_rollback: f64,
    pub t_rerun: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Metrics {
    pub samples: Vec<IterationSample>,
    pub recoveries: Vec<RecoveryBreakdown>,
    /// Total bytes moved per link label (`t2:<node>`, `t3:<node>`).
    pub link_bytes: BTreeMap<String, u64>,
    pub total_stall: f64,
    pub final_loss: f64,
}

impl Metrics {
    pub fn record_link(&mut self, label: String, bytes: u64) {
        *self.link_bytes.entry(label).or_insert(0) += bytes;
    }

    pub fn per_rank_bytes(sample: &IterationSample, rank: RankId, tier: Tier) -> u64 {
        let idx = rank * 3
            + match tier {
                Tier::Tier1 => 0,
                Tier::Tier2 => 1,
                Tier::Tier3 => 2,
            };
        sample.per_rank_bytes.get(idx).copied().unwrap_or(0)
    }

    /// CSV series: one row per sampled iteration.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "iteration,t,loss,stall,tier1_bytes,tier2_bytes,tier3_bytes"
        )?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.iteration, s.t, s.loss, s.stall, s.tier1_bytes, s.tier2_bytes, s.tier3_bytes
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_one_row_per_sample() {
        let mut m = Metrics::default();
        for i in 0..3 {
            m.samples.push(IterationSample {
                iteration: i,
                t: i as f64 * 0.1,
                loss: 1.0,
                stall: 0.0,
                tier1_bytes: 10,
                tier2_bytes: 20,
                tier3_bytes: 30,
                per_rank_bytes: vec![10, 20, 30],
            });
        }
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("iteration,"));
    }
}
