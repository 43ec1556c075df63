//! Per-run invariant suite. All checks are replayed from the logged record
//! streams, so every acceptance flag in a report traces back to concrete
//! events.

use std::collections::{BTreeMap, BTreeSet};

use crate::events::{Event, ObjectClass, WatermarkRecord};
use crate::report::{AcceptanceFlags, RecoveryReport};
use crate::tier::Tier;

#[derive(Debug, Clone)]
pub struct SafetyFindings {
    pub flags: AcceptanceFlags,
    pub violations: Vec<String>,
}

/// Directory part of an object label (`base/v50/rank0` -> `base/v50`).
fn dir_of(label: &str) -> &str {
    label.rsplit_once("/rank").map(|(d, _)| d).unwrap_or(label)
}

fn t3_label(object: ObjectClass, version: u64, start: Option<u64>, rank: usize) -> String {
    match object {
        ObjectClass::Base => format!("base/v{version}/rank{rank}"),
        ObjectClass::Diff => format!("diff/{}_{version}/rank{rank}", start.unwrap_or(version)),
    }
}

/// Replays the event log and cross-references it with the watermark trace
/// and recovery reports.
pub fn check_run(
    events: &[Event],
    wm_trace: &[WatermarkRecord],
    recoveries: &[RecoveryReport],
    catalog_faithful: bool,
) -> SafetyFindings {
    let mut violations = Vec::new();

    // Recoveries never land below the watermark observed at failure time.
    let mut recovered_ok = true;
    for r in recoveries {
        if r.anchor < r.watermark_at_failure {
            recovered_ok = false;
            violations.push(format!(
                "recovery after {} failure at iteration {} anchored at {} below watermark {}",
                r.failure_kind, r.failure_iteration, r.anchor, r.watermark_at_failure
            ));
        }
        if r.replay_end < r.anchor {
            recovered_ok = false;
            violations.push(format!(
                "recovery at iteration {} has replay end {} before anchor {}",
                r.failure_iteration, r.replay_end, r.anchor
            ));
        }
    }

    // Tier-3 reads only ever touch committed directories, and no fetch hits
    // an object a reclaim pass deleted (unless something re-created it).
    let mut committed_dirs: BTreeSet<String> = BTreeSet::new();
    let mut dead: BTreeSet<(Tier, String)> = BTreeSet::new();
    let mut t3_ok = true;
    let mut reclaim_ok = true;
    for e in events {
        match e {
            Event::T3Commit {
                object,
                version,
                start,
                ..
            } => {
                committed_dirs.insert(dir_of(&t3_label(*object, *version, *start, 0)).to_string());
            }
            Event::T3Upload {
                object,
                version,
                start,
                rank,
                ..
            } => {
                dead.remove(&(Tier::Tier3, t3_label(*object, *version, *start, *rank)));
            }
            Event::Put { tier, object, .. } => {
                dead.remove(&(*tier, object.clone()));
            }
            Event::ReclaimDelete { tier, object, .. } => {
                dead.insert((*tier, object.clone()));
            }
            Event::Fetch {
                tier, object, ..
            } => {
                if *tier == Tier::Tier3 && !committed_dirs.contains(dir_of(object)) {
                    t3_ok = false;
                    violations.push(format!("fetched uncommitted Tier-3 object {object}"));
                }
                if dead.contains(&(*tier, object.clone())) {
                    reclaim_ok = false;
                    violations.push(format!("fetched reclaimed object {object} from {tier:?}"));
                }
            }
            _ => {}
        }
    }

    let mut wm_ok = true;
    for pair in wm_trace.windows(2) {
        if pair[1].w < pair[0].w {
            wm_ok = false;
            violations.push(format!(
                "watermark regressed from {} to {}",
                pair[0].w, pair[1].w
            ));
        }
    }

    if !catalog_faithful {
        violations.push("catalog diverged from a rebuild scan of raw storage".to_string());
    }

    SafetyFindings {
        flags: AcceptanceFlags {
            recovered_at_or_above_watermark: recovered_ok,
            no_uncommitted_tier3_reads: t3_ok,
            no_reclaimed_object_fetches: reclaim_ok,
            watermark_monotonic: wm_ok,
            catalog_faithful,
        },
        violations,
    }
}

/// Oracle used in tests: recompute the watermark trace event by event from
/// commit records and compare with the broadcast trace.
pub fn watermark_trace_oracle(events: &[Event]) -> Vec<u64> {
    let mut committed: BTreeMap<u64, bool> = BTreeMap::new();
    let mut trace = Vec::new();
    let mut w = 0u64;
    for e in events {
        if let Event::T3Commit {
            object: ObjectClass::Base,
            version,
            ..
        } = e
        {
            committed.insert(*version, true);
            let newest = committed.keys().next_back().copied().unwrap_or(0);
            if newest > w {
                w = newest;
                trace.push(w);
            }
        }
    }
    trace
}
