//! Per-node reactor for the reading, reception and defence flows.
//!
//! A [`NodeState`] reacts to one stimulus at a time (a local reading, an
//! incoming message, a timer) and answers with the envelopes it wants sent.
//! Everything observable is written to the shared [`Journal`].

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::{baseline_distance, detect_anomalies, update_baseline, AnomalyReport, Baseline, DetectorConfig};
use crate::journal::{CorrectionRecord, Detection, EventKind, Journal, RoundOutcome, RoundRecord};
use crate::store::{DaySeries, MeterStore, DEFAULT_RETENTION_SECS};
use crate::types::{
    decode_envelope, parse_timestamp, MessageKind, NeighborList, NodeId, Reading, SimTime, Timestamp, Validation,
    SECONDS_PER_DAY,
};
use crate::types::Envelope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationLevel {
    Strict,
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Keep the stored value and report the slot as unresolved.
    KeepOwn,
    /// Take the value held by the lowest node id among the tied groups.
    LowestNodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub defence_period_s: f64,
    pub round_deadline_s: f64,
    pub ack_timeout_s: f64,
    pub verification: VerificationLevel,
    pub tie_break: TieBreak,
    pub value_quantum: f64,
    /// Verified replicas needed for a poll; `None` means every neighbor.
    pub min_responders: Option<usize>,
    pub retention_days: i64,
    pub detector: DetectorConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            defence_period_s: 60.0,
            round_deadline_s: 10.0,
            ack_timeout_s: 5.0,
            verification: VerificationLevel::Strict,
            tie_break: TieBreak::KeepOwn,
            value_quantum: 0.1,
            min_responders: None,
            retention_days: DEFAULT_RETENTION_SECS / SECONDS_PER_DAY,
            detector: DetectorConfig::default(),
        }
    }
}

/// "No less, no more": both devices must see the same household.
pub fn verify_source_strict(local: &NeighborList, local_id: NodeId, claimed: &NeighborList, claimant: NodeId) -> bool {
    claimed.with(claimant) == local.with(local_id)
}

/// At least one device of the claimed list belongs to the local household
/// (the local device included).
pub fn verify_source_relaxed(local: &NeighborList, local_id: NodeId, claimed: &NeighborList) -> bool {
    let household = local.with(local_id);
    claimed.iter().any(|id| household.contains(&id))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PollError {
    #[error("insufficient quorum: {got} verified replicas, {needed} required")]
    InsufficientQuorum { needed: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub time: Timestamp,
    pub old: f64,
    pub new: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PollResult {
    pub corrections: Vec<Correction>,
    pub unresolved: Vec<Timestamp>,
}

/// Majority vote per suspicious reading over the node's own copy and the
/// replicas held by its neighbors. An empty `suspicious` set polls every
/// reading of the day. Values are compared after rounding to
/// `value_quantum`; a correction always carries a value some replica holds.
pub fn reconcile_poll(
    own: &DaySeries,
    replicas: &BTreeMap<NodeId, DaySeries>,
    suspicious: &BTreeSet<Timestamp>,
    tie_break: TieBreak,
    value_quantum: f64,
    quorum: usize,
) -> Result<PollResult, PollError> {
    if replicas.len() < quorum {
        return Err(PollError::InsufficientQuorum {
            needed: quorum,
            got: replicas.len(),
        });
    }
    let quantize = |v: f64| (v / value_quantum).round() as i64;
    let mut result = PollResult::default();
    for reading in &own.samples {
        if !suspicious.is_empty() && !suspicious.contains(&reading.time) {
            continue;
        }
        // quantized value -> (votes, lowest holder, that holder's value)
        let mut tally: BTreeMap<i64, (usize, NodeId, f64)> = BTreeMap::new();
        let votes = std::iter::once((own.source, reading.value)).chain(
            replicas
                .iter()
                .filter_map(|(id, series)| series.value_at(reading.time).map(|v| (*id, v))),
        );
        for (holder, value) in votes {
            let entry = tally.entry(quantize(value)).or_insert((0, holder, value));
            entry.0 += 1;
            if holder < entry.1 {
                entry.1 = holder;
                entry.2 = value;
            }
        }
        let top = tally.values().map(|t| t.0).max().unwrap_or(0);
        let leaders: Vec<&(usize, NodeId, f64)> = tally.values().filter(|t| t.0 == top).collect();
        let own_key = quantize(reading.value);
        let winner = if leaders.len() == 1 {
            leaders[0]
        } else {
            match tie_break {
                TieBreak::KeepOwn => {
                    result.unresolved.push(reading.time);
                    continue;
                }
                TieBreak::LowestNodeId => leaders.iter().min_by_key(|t| t.1).copied().expect("leaders non-empty"),
            }
        };
        if quantize(winner.2) != own_key {
            result.corrections.push(Correction {
                time: reading.time,
                old: reading.value,
                new: winner.2,
            });
        }
    }
    Ok(result)
}

/// Envelope addressed to one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: NodeId,
    pub env: Envelope,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Output {
    pub outbound: Vec<Outbound>,
    /// Timer the node wants to be woken by (a round deadline).
    pub wake_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenceRound {
    pub id: usize,
    pub detection: usize,
    pub date: NaiveDate,
    pub suspicious: BTreeSet<Timestamp>,
    pub requested: BTreeSet<NodeId>,
    pub responses: BTreeMap<NodeId, (DaySeries, NeighborList)>,
    pub deadline: SimTime,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub neighbors: NeighborList,
    pub store: MeterStore,
    pub baseline: Baseline,
    /// Per-sample DTW distances of accepted days, oldest first.
    pub distances: Vec<f64>,
    pub config: ProtocolConfig,
    pub pending: Option<DefenceRound>,
    outstanding_acks: BTreeMap<(NodeId, String), SimTime>,
    settled: BTreeMap<NaiveDate, BTreeSet<Timestamp>>,
    settled_whole_day: BTreeSet<NaiveDate>,
    current_date: Option<NaiveDate>,
    fingerprint: Option<(NaiveDate, usize, Option<Timestamp>, u64)>,
    last_report: Option<AnomalyReport>,
}

impl NodeState {
    pub fn new(id: NodeId, neighbors: NeighborList, config: ProtocolConfig) -> Self {
        assert!(!neighbors.contains(id), "a node is not its own neighbor");
        let store = MeterStore::with_retention(id, config.retention_days * SECONDS_PER_DAY);
        let baseline = Baseline::empty(&config.detector.grid());
        NodeState {
            id,
            neighbors,
            store,
            baseline,
            distances: Vec::new(),
            config,
            pending: None,
            outstanding_acks: BTreeMap::new(),
            settled: BTreeMap::new(),
            settled_whole_day: BTreeSet::new(),
            current_date: None,
            fingerprint: None,
            last_report: None,
        }
    }

    pub fn last_report(&self) -> Option<&AnomalyReport> {
        self.last_report.as_ref()
    }

    pub fn outstanding_acks(&self) -> usize {
        self.outstanding_acks.len()
    }

    /// Reading flow: store locally, then broadcast to every neighbor.
    pub fn on_local_reading(&mut self, now: SimTime, r: Reading, journal: &mut Journal) -> Output {
        self.sweep_acks(now, journal);
        journal.log(now, self.id, EventKind::Read, format!("{},{}", r.time, r.value));
        if let Err(e) = self.store.insert(self.id, r) {
            journal.log(now, self.id, EventKind::Skipped, format!("store failed: {e}"));
            return Output::default();
        }
        let mut out = Output::default();
        for to in self.neighbors.iter() {
            let env = Envelope::broadcast(self.id, r, &self.neighbors);
            self.outstanding_acks
                .insert((to, env.time.clone()), now.plus_secs_f64(self.config.ack_timeout_s));
            journal.log(now, self.id, EventKind::Send, format!("reading {} to {to}", env.time));
            out.outbound.push(Outbound { to, env });
        }
        out
    }

    /// Reception flow and the responder side of the defence flow. `from` is
    /// the transport-level sender, used only to answer undecodable bytes.
    pub fn on_message(&mut self, now: SimTime, from: NodeId, bytes: &[u8], journal: &mut Journal) -> Output {
        self.sweep_acks(now, journal);
        let env = match decode_envelope(bytes) {
            Ok(env) => env,
            Err(e) => {
                journal.log(now, self.id, EventKind::Undecodable, format!("from {from}: {e}"));
                return self.reply(from, Envelope::ack(self.id, "", false, &self.neighbors));
            }
        };
        match env.kind {
            MessageKind::ReadingBroadcast => self.on_broadcast(now, env, journal),
            MessageKind::Ack => {
                self.on_ack(now, env, journal);
                Output::default()
            }
            MessageKind::DataRequest => self.on_data_request(now, env, journal),
            MessageKind::DataResponse => self.on_data_response(now, env, journal),
        }
    }

    fn reply(&self, to: NodeId, env: Envelope) -> Output {
        Output {
            outbound: vec![Outbound { to, env }],
            wake_at: None,
        }
    }

    fn on_broadcast(&mut self, now: SimTime, env: Envelope, journal: &mut Journal) -> Output {
        let check = Validation::of(&env, &self.neighbors);
        let reading = env.reading().filter(|_| check.passed());
        let ok = match reading {
            Some(r) => match self.store.insert(env.node, r) {
                Ok(()) => {
                    journal.log(now, self.id, EventKind::Store, format!("from {} {},{}", env.node, r.time, r.value));
                    true
                }
                Err(e) => {
                    journal.log(now, self.id, EventKind::Skipped, format!("store failed: {e}"));
                    false
                }
            },
            None => {
                journal.log(now, self.id, EventKind::Reject, format!("from {}: {check}", env.node));
                false
            }
        };
        self.reply(env.node, Envelope::ack(self.id, &env.time, ok, &self.neighbors))
    }

    fn on_ack(&mut self, now: SimTime, env: Envelope, journal: &mut Journal) {
        let known = self.outstanding_acks.remove(&(env.node, env.time.clone())).is_some();
        let ok = env.ack_ok() == Some(true);
        let kind = if ok { EventKind::AckOk } else { EventKind::AckFalse };
        let note = if known { "" } else { " (unmatched)" };
        journal.log(now, self.id, kind, format!("from {} for {}{note}", env.node, env.time));
    }

    /// Answers with the stored replica of the requested node's day; an
    /// empty series when nothing is held.
    pub fn on_data_request(&mut self, now: SimTime, env: Envelope, journal: &mut Journal) -> Output {
        let (Some(source), Ok(day)) = (env.subject(), parse_timestamp(&env.time)) else {
            journal.log(now, self.id, EventKind::RequestRejected, format!("malformed request from {}", env.node));
            return Output::default();
        };
        if !self.neighbors.contains(env.node) {
            journal.log(now, self.id, EventKind::RequestRejected, format!("unknown requester {}", env.node));
            return Output::default();
        }
        let series = self.store.query_day(source, day.date());
        journal.log(
            now,
            self.id,
            EventKind::RequestServed,
            format!("{} samples of {source} {} to {}", series.len(), day.date(), env.node),
        );
        let response = Envelope::data_response(self.id, source, day, series.samples, &self.neighbors);
        self.reply(env.node, response)
    }

    fn on_data_response(&mut self, now: SimTime, env: Envelope, journal: &mut Journal) -> Output {
        let accepted = match (&mut self.pending, env.subject(), parse_timestamp(&env.time)) {
            (Some(round), Some(source), Ok(day))
                if source == self.id
                    && day.date() == round.date
                    && round.requested.contains(&env.node)
                    && !round.responses.contains_key(&env.node) =>
            {
                let samples: Vec<Reading> = env
                    .series
                    .clone()
                    .unwrap_or_default()
                    .into_iter()
                    .filter(|r| r.time.date() == round.date)
                    .collect();
                let mut samples = samples;
                samples.sort_by_key(|r| r.time);
                samples.dedup_by_key(|r| r.time);
                let series = DaySeries::new(self.id, round.date, samples);
                journal.log(
                    now,
                    self.id,
                    EventKind::ResponseAccepted,
                    format!("round {} from {}: {} samples", round.id, env.node, series.len()),
                );
                round.responses.insert(env.node, (series, env.neighbors.clone()));
                round.responses.len() == round.requested.len()
            }
            _ => {
                journal.log(now, self.id, EventKind::ResponseDiscarded, format!("from {}", env.node));
                return Output::default();
            }
        };
        if accepted {
            self.close_round(now, false, journal);
        }
        Output::default()
    }

    fn sweep_acks(&mut self, now: SimTime, journal: &mut Journal) {
        let expired: Vec<(NodeId, String)> = self
            .outstanding_acks
            .iter()
            .filter(|(_, deadline)| **deadline <= now)
            .map(|(k, _)| k.clone())
            .collect();
        for key in expired {
            self.outstanding_acks.remove(&key);
            journal.log(now, self.id, EventKind::AckTimeout, format!("from {} for {}", key.0, key.1));
        }
    }

    /// Closes the pending round once its deadline has passed.
    pub fn on_wake(&mut self, now: SimTime, journal: &mut Journal) {
        if self.pending.as_ref().is_some_and(|r| r.deadline <= now) {
            self.close_round(now, true, journal);
        }
    }

    /// Defence flow, part 1: analyse the current day and, on an alert,
    /// ask every neighbor for its replica of this node's readings.
    pub fn run_defence_cycle(&mut self, now: SimTime, journal: &mut Journal) -> Output {
        self.sweep_acks(now, journal);
        self.on_wake(now, journal);
        match self.store.evict_expired(now.timestamp()) {
            Ok(0) => {}
            Ok(n) => journal.log(now, self.id, EventKind::Evicted, format!("{n} readings")),
            Err(e) => journal.log(now, self.id, EventKind::Skipped, format!("eviction failed: {e}")),
        }

        let today = now.timestamp().date();
        if let Some(previous) = self.current_date.filter(|d| *d < today) {
            self.finish_day(now, previous, journal);
        }
        self.current_date = Some(today);

        let day = self.store.query_day(self.id, today);
        let fingerprint = (
            today,
            day.len(),
            day.samples.last().map(|r| r.time),
            day.samples.iter().map(|r| r.value).sum::<f64>().to_bits(),
        );
        if self.fingerprint == Some(fingerprint) || day.is_empty() {
            return Output::default();
        }
        self.fingerprint = Some(fingerprint);

        let report = detect_anomalies(&day, &self.baseline, &self.distances, &self.config.detector);
        let suspicious: BTreeSet<Timestamp> =
            report.suspicious_indices.iter().map(|&i| day.samples[i].time).collect();
        self.last_report = Some(report.clone());
        if !report.triggered || self.pending.is_some() {
            return Output::default();
        }
        let settled = self.settled.get(&today);
        let fresh: BTreeSet<Timestamp> = suspicious
            .iter()
            .filter(|t| !settled.is_some_and(|s| s.contains(t)))
            .copied()
            .collect();
        if fresh.is_empty() && (!suspicious.is_empty() || self.settled_whole_day.contains(&today)) {
            return Output::default();
        }

        let detection = journal.detections.len();
        journal.detections.push(Detection {
            id: detection,
            sim_time: now,
            node: self.id,
            date: today,
            suspicious: fresh.iter().copied().collect(),
            distance: report.distance,
            threshold: report.threshold,
        });
        journal.log(
            now,
            self.id,
            EventKind::Detection,
            format!("#{detection} {} suspicious, distance {:?}", fresh.len(), report.distance),
        );
        self.open_round(now, today, detection, fresh, journal)
    }

    fn open_round(
        &mut self,
        now: SimTime,
        date: NaiveDate,
        detection: usize,
        suspicious: BTreeSet<Timestamp>,
        journal: &mut Journal,
    ) -> Output {
        let id = journal.rounds.len();
        let deadline = now.plus_secs_f64(self.config.round_deadline_s);
        let requested: BTreeSet<NodeId> = self.neighbors.iter().collect();
        journal.rounds.push(RoundRecord {
            id,
            node: self.id,
            detection,
            date,
            opened: now,
            closed: None,
            requested: requested.iter().copied().collect(),
            responded: Vec::new(),
            rejected: Vec::new(),
            timed_out: false,
            outcome: None,
            corrections: 0,
            unresolved: Vec::new(),
        });
        journal.log(now, self.id, EventKind::RoundOpened, format!("round {id} for {date}"));
        let day = Timestamp::start_of_day(date);
        let outbound = requested
            .iter()
            .map(|&to| Outbound {
                to,
                env: Envelope::data_request(self.id, self.id, day, &self.neighbors),
            })
            .collect();
        self.pending = Some(DefenceRound {
            id,
            detection,
            date,
            suspicious,
            requested,
            responses: BTreeMap::new(),
            deadline,
        });
        if self.neighbors.is_empty() {
            self.close_round(now, false, journal);
            return Output::default();
        }
        Output {
            outbound,
            wake_at: Some(deadline),
        }
    }

    /// Defence flow, part 2: verify the responders, poll, and correct.
    fn close_round(&mut self, now: SimTime, by_deadline: bool, journal: &mut Journal) {
        let Some(round) = self.pending.take() else { return };
        let mut verified = BTreeMap::new();
        let mut rejected = Vec::new();
        for (node, (series, claimed)) in &round.responses {
            let ok = match self.config.verification {
                VerificationLevel::Strict => verify_source_strict(&self.neighbors, self.id, claimed, *node),
                VerificationLevel::Relaxed => verify_source_relaxed(&self.neighbors, self.id, claimed),
            };
            if ok {
                verified.insert(*node, series.clone());
            } else {
                rejected.push(*node);
                journal.log(now, self.id, EventKind::SourceRejected, format!("round {} from {node}", round.id));
            }
        }
        let quorum = self.config.min_responders.unwrap_or(self.neighbors.len());
        let own = self.store.query_day(self.id, round.date);
        let poll = reconcile_poll(
            &own,
            &verified,
            &round.suspicious,
            self.config.tie_break,
            self.config.value_quantum,
            quorum,
        );

        let (outcome, applied, unresolved) = match poll {
            Ok(result) => {
                let applied = self.apply_corrections(now, &round, &result.corrections, journal);
                for t in &result.unresolved {
                    journal.log(now, self.id, EventKind::Unresolved, format!("round {} at {t}", round.id));
                }
                let outcome = if applied > 0 {
                    RoundOutcome::Restored
                } else if !result.unresolved.is_empty() {
                    RoundOutcome::Unresolved
                } else {
                    RoundOutcome::NoChange
                };
                if round.suspicious.is_empty() {
                    self.settled_whole_day.insert(round.date);
                }
                self.settled.entry(round.date).or_default().extend(round.suspicious.iter().copied());
                (outcome, applied, result.unresolved)
            }
            Err(e) => {
                journal.log(now, self.id, EventKind::Skipped, format!("round {}: {e}", round.id));
                (RoundOutcome::InsufficientQuorum, 0, Vec::new())
            }
        };
        // a later cycle must look at the (possibly restored) day again
        self.fingerprint = None;

        let record = journal.round_mut(round.id);
        record.closed = Some(now);
        record.responded = round.responses.keys().copied().collect();
        record.rejected = rejected;
        record.timed_out = by_deadline;
        record.outcome = Some(outcome);
        record.corrections = applied;
        record.unresolved = unresolved;
        journal.log(
            now,
            self.id,
            EventKind::RoundClosed,
            format!(
                "round {} {:?}: {} responses, {applied} corrections{}",
                round.id,
                outcome,
                round.responses.len(),
                if by_deadline { ", deadline" } else { "" }
            ),
        );
    }

    /// Writes the poll winners back into the node's own collection and
    /// records every modification.
    pub fn apply_corrections(
        &mut self,
        now: SimTime,
        round: &DefenceRound,
        corrections: &[Correction],
        journal: &mut Journal,
    ) -> usize {
        let mut applied = 0;
        for c in corrections {
            if let Err(e) = self.store.insert(self.id, Reading::new(c.time, c.new)) {
                journal.log(now, self.id, EventKind::Skipped, format!("correction failed: {e}"));
                continue;
            }
            applied += 1;
            journal.log(now, self.id, EventKind::Correction, format!("{} {} -> {}", c.time, c.old, c.new));
            journal.corrections.push(CorrectionRecord {
                sim_time: now,
                node: self.id,
                round: round.id,
                detection: round.detection,
                time: c.time,
                old: c.old,
                new: c.new,
            });
        }
        applied
    }

    /// End of day: a day that passes the detector feeds the baseline.
    fn finish_day(&mut self, now: SimTime, date: NaiveDate, journal: &mut Journal) {
        let day = self.store.query_day(self.id, date);
        if day.is_empty() {
            return;
        }
        let cfg = &self.config.detector;
        let report = detect_anomalies(&day, &self.baseline, &self.distances, cfg);
        let distance = baseline_distance(&day, &self.baseline, cfg);
        if report.triggered {
            journal.log(now, self.id, EventKind::Skipped, format!("baseline: {date} not clean"));
            return;
        }
        match update_baseline(&self.baseline, &day, &cfg.grid()) {
            Ok(b) => {
                self.baseline = b;
                if let Some(d) = distance {
                    self.distances.push(d);
                }
                journal.log(
                    now,
                    self.id,
                    EventKind::BaselineUpdated,
                    format!("{date}, {} days", self.baseline.count),
                );
            }
            Err(e) => journal.log(now, self.id, EventKind::Skipped, format!("baseline: {date}: {e}")),
        }
        self.settled.retain(|d, _| *d >= date);
        self.settled_whole_day.retain(|d| *d >= date);
    }
}
