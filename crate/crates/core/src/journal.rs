//! Structured run log: one record per store/send/ack/trigger/correction,
//! plus the detection, round and correction tables derived from it.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::types::{NodeId, SimTime, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Read,
    Store,
    Send,
    Reject,
    AckOk,
    AckFalse,
    AckTimeout,
    Undecodable,
    RequestServed,
    RequestRejected,
    ResponseAccepted,
    ResponseDiscarded,
    Detection,
    RoundOpened,
    RoundClosed,
    SourceRejected,
    Correction,
    Unresolved,
    BaselineUpdated,
    Evicted,
    Dropped,
    Skipped,
    Attack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub sim_time: SimTime,
    pub node: NodeId,
    pub kind: EventKind,
    pub details: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: usize,
    pub sim_time: SimTime,
    pub node: NodeId,
    pub date: NaiveDate,
    /// Timestamps of the suspicious readings.
    pub suspicious: Vec<Timestamp>,
    pub distance: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundOutcome {
    Restored,
    NoChange,
    Unresolved,
    InsufficientQuorum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub id: usize,
    pub node: NodeId,
    pub detection: usize,
    pub date: NaiveDate,
    pub opened: SimTime,
    pub closed: Option<SimTime>,
    pub requested: Vec<NodeId>,
    pub responded: Vec<NodeId>,
    pub rejected: Vec<NodeId>,
    /// Closed by the deadline rather than by the last response.
    pub timed_out: bool,
    pub outcome: Option<RoundOutcome>,
    pub corrections: usize,
    pub unresolved: Vec<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub sim_time: SimTime,
    pub node: NodeId,
    pub round: usize,
    pub detection: usize,
    pub time: Timestamp,
    pub old: f64,
    pub new: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Journal {
    pub events: Vec<Event>,
    pub detections: Vec<Detection>,
    pub rounds: Vec<RoundRecord>,
    pub corrections: Vec<CorrectionRecord>,
    /// When false only the tables are kept, not the per-event records.
    #[serde(skip)]
    pub keep_events: bool,
    #[serde(skip)]
    hasher: Option<Sha256>,
    #[serde(skip)]
    counts: BTreeMap<(NodeId, EventKind), u64>,
}

impl Journal {
    pub fn new(keep_events: bool) -> Self {
        Journal {
            keep_events,
            hasher: Some(Sha256::new()),
            ..Journal::default()
        }
    }

    pub fn log(&mut self, sim_time: SimTime, node: NodeId, kind: EventKind, details: impl Into<String>) {
        let event = Event {
            sim_time,
            node,
            kind,
            details: details.into(),
        };
        let hasher = self.hasher.get_or_insert_with(Sha256::new);
        hasher.update(event_line(&event).as_bytes());
        *self.counts.entry((node, kind)).or_default() += 1;
        if self.keep_events {
            self.events.push(event);
        }
    }

    /// Per-node, per-kind event totals.
    pub fn counts(&self) -> &BTreeMap<(NodeId, EventKind), u64> {
        &self.counts
    }

    pub fn count(&self, node: NodeId, kind: EventKind) -> u64 {
        self.counts.get(&(node, kind)).copied().unwrap_or(0)
    }

    /// SHA-256 over every logged event line, in order.
    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().unwrap_or_default().finalize())
    }

    pub fn round_mut(&mut self, id: usize) -> &mut RoundRecord {
        &mut self.rounds[id]
    }
}

/// `sim_time,node,kind,details` with the kind in snake case.
pub fn event_line(e: &Event) -> String {
    let kind = serde_json::to_value(e.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    format!("{},{},{},{}\n", e.sim_time, e.node, kind, e.details)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_events_even_when_not_kept() {
        let n = NodeId::new(1).unwrap();
        let mut kept = Journal::new(true);
        let mut lean = Journal::new(false);
        for j in [&mut kept, &mut lean] {
            j.log(SimTime::from_micros(5), n, EventKind::Store, "2019-06-30 18:00:02,30");
            j.log(SimTime::from_micros(9), n, EventKind::Send, "to 2");
        }
        assert_eq!(kept.digest(), lean.digest());
        assert_eq!(kept.events.len(), 2);
        assert!(lean.events.is_empty());
        assert_eq!(lean.count(n, EventKind::Store), 1);
        let line = event_line(&kept.events[0]);
        assert!(line.ends_with(",1,store,2019-06-30 18:00:02,30\n"), "{line}");
    }
}
