//! Structured event log records (JSON lines) emitted by the simulator.
//!
//! Save-path events carry `{t, rank, kind, bytes, version}`; recovery and
//! reclamation add their own kinds on the same stream. The watermark trace
//! is a separate JSON-lines file of `{t, W, committed_map}` records.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::tier::Tier;

/// Object class tag for Tier-3 events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Base,
    Diff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    /// A differential batch was sealed; `version` is its last iteration.
    DiffSeal {
        t: f64,
        rank: usize,
        bytes: u64,
        version: u64,
    },
    /// One paced replication micro-chunk was handed to the peer link.
    Chunk {
        t: f64,
        rank: usize,
        bytes: u64,
        version: u64,
    },
    /// Remaining replication bytes were flushed synchronously before a new
    /// base checkpoint overwrote the buffer.
    SyncFlush {
        t: f64,
        rank: usize,
        bytes: u64,
        version: u64,
    },
    /// A Tier-3 upload finished and its per-rank marker was written.
    T3Upload {
        t: f64,
        rank: usize,
        bytes: u64,
        version: u64,
        object: ObjectClass,
        #[serde(skip_serializing_if = "Option::is_none")]
        start: Option<u64>,
    },
    /// The coordinator published the global commit marker.
    T3Commit {
        t: f64,
        rank: usize,
        bytes: u64,
        version: u64,
        object: ObjectClass,
        #[serde(skip_serializing_if = "Option::is_none")]
        start: Option<u64>,
    },
    /// Foreground stall charged to the training loop.
    Stall {
        t: f64,
        rank: usize,
        seconds: f64,
        version: u64,
    },
    Failure {
        t: f64,
        iteration: u64,
        failure: String,
    },
    /// Recovery probed a tier for availability.
    Probe {
        t: f64,
        tier: Tier,
        latency: f64,
    },
    /// Wall time of one parallel fetch phase during recovery.
    FetchPhase {
        t: f64,
        phase: ObjectClass,
        seconds: f64,
    },
    /// One object fetched during recovery.
    Fetch {
        t: f64,
        rank: usize,
        tier: Tier,
        object: String,
        bytes: u64,
    },
    /// A volatile-tier store accepted an object.
    Put {
        t: f64,
        rank: usize,
        tier: Tier,
        object: String,
        bytes: u64,
    },
    /// Differential replay compute during recovery.
    Replay {
        t: f64,
        seconds: f64,
        iterations: u64,
    },
    ReclaimDelete {
        t: f64,
        rank: usize,
        tier: Tier,
        object: String,
    },
    RecoveryStart {
        t: f64,
        iteration: u64,
    },
    RecoveryDone {
        t: f64,
        iteration: u64,
        anchor: u64,
        replay_end: u64,
        t_rollback: f64,
        t_rerun: f64,
    },
}

impl Event {
    pub fn t(&self) -> f64 {
        match self {
            Event::DiffSeal { t, .. }
            | Event::Chunk { t, .. }
            | Event::SyncFlush { t, .. }
            | Event::T3Upload { t, .. }
            | Event::T3Commit { t, .. }
            | Event::Stall { t, .. }
            | Event::Failure { t, .. }
            | Event::Probe { t, .. }
            | Event::FetchPhase { t, .. }
            | Event::Fetch { t, .. }
            | Event::Put { t, .. }
            | Event::Replay { t, .. }
            | Event::ReclaimDelete { t, .. }
            | Event::RecoveryStart { t, .. }
            | Event::RecoveryDone { t, .. } => *t,
        }
    }
}

/// Watermark trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkRecord {
    pub t: f64,
    #[serde(rename = "W")]
    pub w: u64,
    /// Highest base version each node has fully committed to Tier-3.
    pub committed_map: BTreeMap<String, u64>,
}

/// In-memory event stream with a JSON-lines writer.
#[derive(Debug, Default)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf8")
    }
}

pub fn write_watermark_trace<W: Write>(
    trace: &[WatermarkRecord],
    mut w: W,
) -> std::io::Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_events_serialize_with_mandated_fields() {
        let e = Event::DiffSeal {
            t: 1.5,
            rank: 2,
            bytes: 100,
            version: 4,
        };
        let json: serde_json::Value = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(json["kind"], "diff_seal");
        assert_eq!(json["t"], 1.5);
        assert_eq!(json["rank"], 2);
        assert_eq!(json["bytes"], 100);
        assert_eq!(json["version"], 4);
    }

    #[test]
    fn watermark_record_uses_uppercase_w() {
        let rec = WatermarkRecord {
            t: 9.0,
            w: 50,
            committed_map: [("0".to_string(), 50u64)].into_iter().collect(),
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"W\":50"), "{json}");
        let back: WatermarkRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut log = EventLog::new();
        log.push(Event::Chunk {
            t: 0.25,
            rank: 0,
            bytes: 1024,
            version: 50,
        });
        log.push(Event::RecoveryStart { t: 3.0, iteration: 7 });
        let text = log.to_jsonl_string();
        let parsed: Vec<Event> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed, log.events());
    }
}
