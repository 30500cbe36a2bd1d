//! Deterministic discrete-event network.
//!
//! Every node owns a finite FIFO receive queue with deterministic service
//! (M/D/1/K under Poisson floods) and a load-proportional CPU model. Packets
//! beyond the queue capacity are dropped; a host whose CPU demand reaches
//! 100% serves its queue more slowly and stops running its reactor, so
//! readings, timers and protocol deliveries on that host are lost.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;

use chrono::Days;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::journal::{EventKind, Journal};
use crate::protocol::{NodeState, Output};
use crate::synth::{generate_day, PatternSpec};
use crate::types::{encode_envelope, NodeId, Reading, SimTime, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid flood: {0}")]
    InvalidFlood(String),
}

/// Link, queue and CPU parameters. The defaults are fitted so that the
/// bundled DoS sweep lands on the published loss/CPU table; they are not
/// measurements of real hardware.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_latency_ms: f64,
    pub jitter_ms: f64,
    /// Packets the receive queue holds, including the one in service.
    pub queue_capacity: usize,
    /// Packets per second served by an unloaded host.
    pub service_rate: f64,
    pub cpu_baseline: f64,
    /// Weighted packets per second that correspond to 100% CPU.
    pub saturation_rate: f64,
    /// Service rate multiplier while the CPU is saturated.
    pub saturated_service_factor: f64,
    pub cpu_window_s: f64,
    /// A saturated host recovers once its demand falls below this.
    pub cpu_release: f64,
    pub probe_timeout_s: f64,
    /// CPU weight of one protocol message.
    pub protocol_cpu_cost: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_latency_ms: 0.95,
            jitter_ms: 0.1,
            queue_capacity: 100,
            service_rate: 1000.0,
            cpu_baseline: 0.05,
            saturation_rate: 2000.0,
            saturated_service_factor: crate::attacks::FITTED_SATURATED_SERVICE_FACTOR,
            cpu_window_s: 2.0,
            cpu_release: 0.9,
            probe_timeout_s: 30.0,
            protocol_cpu_cost: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("service_rate", self.service_rate),
            ("saturation_rate", self.saturation_rate),
            ("saturated_service_factor", self.saturated_service_factor),
            ("cpu_window_s", self.cpu_window_s),
            ("cpu_release", self.cpu_release),
            ("probe_timeout_s", self.probe_timeout_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.base_latency_ms >= 0.0 && self.jitter_ms >= 0.0) {
            return Err("latencies must be non-negative".into());
        }
        if self.queue_capacity == 0 {
            return Err("queue_capacity must be at least 1".into());
        }
        Ok(())
    }
}

/// Traffic source: a household node or an outside machine.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Endpoint {
    Node(NodeId),
    External(String),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Node(id) => write!(f, "node{id}"),
            Endpoint::External(name) => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloodSpec {
    pub attacker: Endpoint,
    pub target: NodeId,
    /// Mean packets per second (Poisson).
    pub rate: f64,
    /// CPU weight of one flood packet at the target.
    pub cpu_cost: f64,
    pub start: SimTime,
    pub duration_s: f64,
    /// Destination port, kept for reporting only.
    pub port: Option<u16>,
}

impl FloodSpec {
    pub fn end(&self) -> SimTime {
        self.start.plus_secs_f64(self.duration_s)
    }
}

/// Packet accounting; `sent = delivered + dropped_queue + dropped_loss + in_flight`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped_queue: u64,
    pub dropped_loss: u64,
    pub in_flight: u64,
}

impl Counters {
    pub fn balanced(&self) -> bool {
        self.sent == self.delivered + self.dropped_queue + self.dropped_loss + self.in_flight
    }
}

/// One probe/metrics window at a monitored target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub sim_time: SimTime,
    pub target: NodeId,
    pub rtt_ms: Option<f64>,
    pub timeout: bool,
    pub offered: u64,
    pub dropped: u64,
    pub loss_ratio: f64,
    pub cpu_load: f64,
}

#[derive(Debug, Clone)]
enum Payload {
    Protocol { from: NodeId, bytes: Vec<u8> },
    Junk,
    Probe { sent: SimTime },
}

#[derive(Debug, Clone)]
struct Packet {
    to: NodeId,
    cpu_cost: f64,
    payload: Payload,
}

#[derive(Debug)]
enum Event {
    Reading(NodeId),
    Tick(NodeId),
    Wake(NodeId),
    Arrival(Packet),
    Deliver { to: NodeId, from: NodeId, bytes: Vec<u8> },
    FloodSend(usize),
    Probe,
    WindowEnd,
}

struct Scheduled {
    time: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Receive queue and CPU bookkeeping of one host.
#[derive(Debug, Default)]
struct Host {
    departures: VecDeque<SimTime>,
    last_departure: SimTime,
    recent: VecDeque<(SimTime, f64)>,
    recent_weight: f64,
    window_offered: u64,
    window_dropped: u64,
    window_weight: f64,
    saturated: bool,
    counters: Counters,
}

impl Host {
    fn prune(&mut self, now: SimTime, window_us: i64) {
        while let Some(&(t, w)) = self.recent.front() {
            if t.micros() > now.micros() - window_us {
                break;
            }
            self.recent.pop_front();
            self.recent_weight -= w;
        }
        if self.recent.is_empty() {
            self.recent_weight = 0.0;
        }
        while self.departures.front().is_some_and(|d| *d <= now) {
            self.departures.pop_front();
        }
    }
}

struct ReadingSource {
    spec: PatternSpec,
    end: Timestamp,
    next_date: chrono::NaiveDate,
    buffer: VecDeque<Reading>,
}

impl ReadingSource {
    fn next(&mut self, node: NodeId) -> Option<Reading> {
        while self.buffer.is_empty() {
            if Timestamp::start_of_day(self.next_date) >= self.end {
                return None;
            }
            self.buffer.extend(generate_day(&self.spec, node, self.next_date).samples);
            self.next_date = self.next_date + Days::new(1);
        }
        let r = self.buffer.pop_front()?;
        (r.time < self.end).then_some(r)
    }
}

struct Monitor {
    target: NodeId,
    interval_s: f64,
    until: SimTime,
    window_start: SimTime,
    probe: Option<Option<f64>>,
}

pub struct Simulation {
    now: SimTime,
    seq: u64,
    events: BinaryHeap<Scheduled>,
    nodes: BTreeMap<NodeId, NodeState>,
    hosts: BTreeMap<NodeId, Host>,
    sources: BTreeMap<NodeId, ReadingSource>,
    floods: Vec<FloodSpec>,
    flood_rngs: Vec<ChaCha8Rng>,
    seed: u64,
    monitor: Option<Monitor>,
    windows: Vec<WindowMetrics>,
    config: NetworkConfig,
    rng: ChaCha8Rng,
    journal: Journal,
}

impl Simulation {
    pub fn new(start: SimTime, config: NetworkConfig, seed: u64, keep_events: bool) -> Self {
        Simulation {
            now: start,
            seq: 0,
            events: BinaryHeap::new(),
            nodes: BTreeMap::new(),
            hosts: BTreeMap::new(),
            sources: BTreeMap::new(),
            floods: Vec::new(),
            flood_rngs: Vec::new(),
            seed,
            monitor: None,
            windows: Vec::new(),
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            journal: Journal::new(keep_events),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn schedule(&mut self, time: SimTime, event: Event) {
        debug_assert!(time >= self.now, "events never go back in time");
        self.seq += 1;
        self.events.push(Scheduled {
            time,
            seq: self.seq,
            event,
        });
    }

    /// Registers a node. Readings from `pattern` are produced over
    /// `[now, until)` and the defence cycle runs once per period.
    pub fn add_node(&mut self, state: NodeState, pattern: Option<PatternSpec>, until: Timestamp) {
        let id = state.id;
        let period = state.config.defence_period_s;
        self.hosts.insert(id, Host::default());
        self.nodes.insert(id, state);
        if let Some(spec) = pattern {
            let from = self.now.timestamp();
            let mut source = ReadingSource {
                spec,
                end: until,
                next_date: from.date(),
                buffer: VecDeque::new(),
            };
            let first = loop {
                match source.next(id) {
                    Some(r) if r.time < from => continue,
                    other => break other,
                }
            };
            if let Some(r) = first {
                source.buffer.push_front(r);
                self.sources.insert(id, source);
                self.schedule(SimTime::from_timestamp(r.time), Event::Reading(id));
            }
        }
        self.schedule(self.now.plus_secs_f64(period), Event::Tick(id));
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeState> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeState> {
        self.nodes.get_mut(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeState> {
        self.nodes.values()
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn journal_mut(&mut self) -> &mut Journal {
        &mut self.journal
    }

    pub fn windows(&self) -> &[WindowMetrics] {
        &self.windows
    }

    pub fn floods(&self) -> &[FloodSpec] {
        &self.floods
    }

    pub fn counters(&self, id: NodeId) -> Option<Counters> {
        self.hosts.get(&id).map(|h| h.counters)
    }

    pub fn total_counters(&self) -> Counters {
        self.hosts.values().fold(Counters::default(), |mut acc, h| {
            acc.sent += h.counters.sent;
            acc.delivered += h.counters.delivered;
            acc.dropped_queue += h.counters.dropped_queue;
            acc.dropped_loss += h.counters.dropped_loss;
            acc.in_flight += h.counters.in_flight;
            acc
        })
    }

    fn latency(&mut self) -> f64 {
        let jitter = if self.config.jitter_ms > 0.0 {
            self.rng.random_range(0.0..self.config.jitter_ms)
        } else {
            0.0
        };
        (self.config.base_latency_ms + jitter) / 1000.0
    }

    fn transmit(&mut self, packet: Packet) {
        let to = packet.to;
        let host = self.hosts.get_mut(&to).expect("transmit to a registered host");
        host.counters.sent += 1;
        host.counters.in_flight += 1;
        let at = self.now.plus_secs_f64(self.latency());
        self.schedule(at, Event::Arrival(packet));
    }

    /// Sends a protocol envelope through the target's receive queue.
    pub fn send(&mut self, from: NodeId, to: NodeId, env: &crate::types::Envelope) -> Result<(), NetError> {
        for id in [from, to] {
            if !self.hosts.contains_key(&id) {
                return Err(NetError::UnknownNode(id));
            }
        }
        self.transmit(Packet {
            to,
            cpu_cost: self.config.protocol_cpu_cost,
            payload: Payload::Protocol {
                from,
                bytes: encode_envelope(env),
            },
        });
        Ok(())
    }

    /// Schedules a Poisson stream of junk packets at `spec.target`.
    pub fn flood(&mut self, spec: FloodSpec) -> Result<(), NetError> {
        if !self.hosts.contains_key(&spec.target) {
            return Err(NetError::UnknownNode(spec.target));
        }
        if let Endpoint::Node(id) = &spec.attacker {
            if !self.hosts.contains_key(id) {
                return Err(NetError::UnknownNode(*id));
            }
        }
        if !(spec.rate > 0.0) || !(spec.duration_s >= 0.0) || !(spec.cpu_cost >= 0.0) {
            return Err(NetError::InvalidFlood(format!(
                "rate {} duration {} cost {}",
                spec.rate, spec.duration_s, spec.cpu_cost
            )));
        }
        let idx = self.floods.len();
        let start = spec.start.max(self.now);
        let active = spec.duration_s > 0.0;
        self.journal.log(
            self.now,
            spec.target,
            EventKind::Attack,
            format!("flood from {} at {} pkt/s for {} s", spec.attacker, spec.rate, spec.duration_s),
        );
        self.floods.push(spec);
        // one stream per flood so adding an attacker leaves the others' arrivals unchanged
        self.flood_rngs
            .push(ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x5EED_0000 + idx as u64)));
        if active {
            self.schedule(start, Event::FloodSend(idx));
        }
        Ok(())
    }

    /// Probes `target` from `prober` once per window until `until` and
    /// records loss and CPU load per window.
    pub fn monitor(&mut self, target: NodeId, prober: Endpoint, interval_s: f64, until: SimTime) -> Result<(), NetError> {
        if !self.hosts.contains_key(&target) {
            return Err(NetError::UnknownNode(target));
        }
        self.journal.log(self.now, target, EventKind::Attack, format!("probing from {prober} every {interval_s} s"));
        assert!(interval_s > 0.0, "probe interval must be positive");
        self.monitor = Some(Monitor {
            target,
            interval_s,
            until,
            window_start: self.now,
            probe: None,
        });
        if let Some(h) = self.hosts.get_mut(&target) {
            h.window_offered = 0;
            h.window_dropped = 0;
            h.window_weight = 0.0;
        }
        self.schedule(self.now, Event::Probe);
        Ok(())
    }

    /// Current CPU demand of a host, uncapped.
    pub fn cpu_demand(&mut self, id: NodeId) -> f64 {
        let window_us = (self.config.cpu_window_s * SimTime::MICROS_PER_SEC as f64) as i64;
        let now = self.now;
        let Some(host) = self.hosts.get_mut(&id) else { return 0.0 };
        host.prune(now, window_us);
        self.config.cpu_baseline + host.recent_weight / (self.config.saturation_rate * self.config.cpu_window_s)
    }

    pub fn cpu_load(&mut self, id: NodeId) -> f64 {
        self.cpu_demand(id).min(1.0)
    }

    /// Saturation with hysteresis: entered at 100% demand, left below
    /// `cpu_release`.
    pub fn is_saturated(&mut self, id: NodeId) -> bool {
        let demand = self.cpu_demand(id);
        let release = self.config.cpu_release;
        let Some(host) = self.hosts.get_mut(&id) else { return false };
        host.saturated = if host.saturated { demand >= release } else { demand >= 1.0 };
        host.saturated
    }

    /// Processes every event with time `<= t`, then moves the clock to `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while self.events.peek().is_some_and(|e| e.time <= t) {
            let Scheduled { time, event, .. } = self.events.pop().expect("peeked");
            self.now = time;
            self.handle(event);
        }
        self.now = self.now.max(t);
    }

    fn dispatch(&mut self, from: NodeId, out: Output) {
        for o in out.outbound {
            self.send(from, o.to, &o.env).expect("protocol peers are registered");
        }
        if let Some(at) = out.wake_at {
            self.schedule(at.max(self.now), Event::Wake(from));
        }
    }

    fn handle(&mut self, event: Event) {
        let now = self.now;
        match event {
            Event::Reading(id) => {
                let reading = self.sources.get_mut(&id).and_then(|s| s.buffer.pop_front());
                if let Some(r) = reading {
                    if self.is_saturated(id) {
                        self.journal.log(now, id, EventKind::Skipped, format!("reading {} lost: cpu saturated", r.time));
                    } else {
                        let node = self.nodes.get_mut(&id).expect("registered");
                        let out = node.on_local_reading(now, r, &mut self.journal);
                        self.dispatch(id, out);
                    }
                }
                if let Some(next) = self.sources.get_mut(&id).and_then(|s| {
                    let r = s.next(id)?;
                    s.buffer.push_front(r);
                    Some(r)
                }) {
                    self.schedule(SimTime::from_timestamp(next.time).max(now), Event::Reading(id));
                }
            }
            Event::Tick(id) => {
                if self.is_saturated(id) {
                    self.journal.log(now, id, EventKind::Skipped, "defence cycle: cpu saturated");
                } else {
                    let node = self.nodes.get_mut(&id).expect("registered");
                    let out = node.run_defence_cycle(now, &mut self.journal);
                    self.dispatch(id, out);
                }
                let period = self.nodes[&id].config.defence_period_s;
                self.schedule(now.plus_secs_f64(period), Event::Tick(id));
            }
            Event::Wake(id) => {
                if !self.is_saturated(id) {
                    let node = self.nodes.get_mut(&id).expect("registered");
                    node.on_wake(now, &mut self.journal);
                }
            }
            Event::Arrival(packet) => self.arrive(packet),
            Event::Deliver { to, from, bytes } => {
                let saturated = self.is_saturated(to);
                let host = self.hosts.get_mut(&to).expect("registered");
                host.counters.in_flight -= 1;
                if saturated {
                    host.counters.dropped_loss += 1;
                    host.window_dropped += 1;
                    self.journal.log(now, to, EventKind::Dropped, format!("message from {from}: cpu saturated"));
                } else {
                    host.counters.delivered += 1;
                    let node = self.nodes.get_mut(&to).expect("registered");
                    let out = node.on_message(now, from, &bytes, &mut self.journal);
                    self.dispatch(to, out);
                }
            }
            Event::FloodSend(idx) => {
                let spec = &self.floods[idx];
                if now >= spec.end() {
                    return;
                }
                let (target, cost, rate) = (spec.target, spec.cpu_cost, spec.rate);
                self.transmit(Packet {
                    to: target,
                    cpu_cost: cost,
                    payload: Payload::Junk,
                });
                let gap = Exp::new(rate).expect("rate checked positive").sample(&mut self.flood_rngs[idx]);
                self.schedule(now.plus_secs_f64(gap), Event::FloodSend(idx));
            }
            Event::Probe => {
                let Some(m) = &self.monitor else { return };
                if now >= m.until {
                    return;
                }
                let (target, interval) = (m.target, m.interval_s);
                self.transmit(Packet {
                    to: target,
                    cpu_cost: 0.0,
                    payload: Payload::Probe { sent: now },
                });
                self.schedule(now.plus_secs_f64(interval), Event::WindowEnd);
            }
            Event::WindowEnd => self.close_window(),
        }
    }

    fn arrive(&mut self, packet: Packet) {
        let now = self.now;
        let window_us = (self.config.cpu_window_s * SimTime::MICROS_PER_SEC as f64) as i64;
        let capacity = self.config.queue_capacity;
        let saturated = self.is_saturated(packet.to);
        let service = 1.0
            / (self.config.service_rate
                * if saturated {
                    self.config.saturated_service_factor
                } else {
                    1.0
                });
        let host = self.hosts.get_mut(&packet.to).expect("registered");
        host.prune(now, window_us);
        host.recent.push_back((now, packet.cpu_cost));
        host.recent_weight += packet.cpu_cost;
        host.window_offered += 1;
        host.window_weight += packet.cpu_cost;

        let accepted = host.departures.len() < capacity;
        let departure = if accepted {
            let d = host.last_departure.max(now).plus_secs_f64(service);
            host.last_departure = d;
            host.departures.push_back(d);
            Some(d)
        } else {
            host.counters.in_flight -= 1;
            host.counters.dropped_queue += 1;
            host.window_dropped += 1;
            None
        };

        match packet.payload {
            Payload::Protocol { from, bytes } => match departure {
                Some(d) => self.schedule(d, Event::Deliver { to: packet.to, from, bytes }),
                None => self.journal.log(now, packet.to, EventKind::Dropped, format!("message from {from}: queue full")),
            },
            Payload::Junk => {
                if departure.is_some() {
                    host.counters.in_flight -= 1;
                    host.counters.delivered += 1;
                }
            }
            Payload::Probe { sent } => {
                if departure.is_some() {
                    host.counters.in_flight -= 1;
                    host.counters.delivered += 1;
                }
                let rtt = departure
                    .map(|d| 2.0 * d.secs_since(sent))
                    .filter(|rtt| *rtt <= self.config.probe_timeout_s);
                if let Some(m) = &mut self.monitor {
                    m.probe = Some(rtt.map(|s| s * 1000.0));
                }
            }
        }
    }

    fn close_window(&mut self) {
        let now = self.now;
        let Some(m) = &mut self.monitor else { return };
        let target = m.target;
        let start = m.window_start;
        let span = now.secs_since(start).max(f64::MIN_POSITIVE);
        let rtt = m.probe.take().flatten();
        m.window_start = now;
        let host = self.hosts.get_mut(&target).expect("registered");
        let cpu = (self.config.cpu_baseline + host.window_weight / (self.config.saturation_rate * span)).min(1.0);
        let loss = if host.window_offered == 0 {
            0.0
        } else {
            host.window_dropped as f64 / host.window_offered as f64
        };
        self.windows.push(WindowMetrics {
            sim_time: start,
            target,
            rtt_ms: rtt,
            timeout: rtt.is_none(),
            offered: host.window_offered,
            dropped: host.window_dropped,
            loss_ratio: loss,
            cpu_load: cpu,
        });
        host.window_offered = 0;
        host.window_dropped = 0;
        host.window_weight = 0.0;
        self.schedule(now, Event::Probe);
    }
}

/// Blocking probability of an M/D/1/K queue (K counts the packet in
/// service) at offered load `rho`, from the embedded departure chain.
pub fn md1k_loss(rho: f64, capacity: usize) -> f64 {
    assert!(rho > 0.0 && capacity >= 1);
    if capacity == 1 {
        return rho / (1.0 + rho);
    }
    let k = capacity;
    // a[j]: probability of j Poisson arrivals during one service time
    let mut a = vec![0.0; k + 1];
    a[0] = (-rho).exp();
    for j in 1..=k {
        a[j] = a[j - 1] * rho / j as f64;
    }
    // departure-epoch distribution over 0..k-1 by forward recursion
    let mut pi = vec![0.0; k];
    pi[0] = 1.0;
    for j in 0..k - 1 {
        // balance: pi[j] = pi[0] a[j] + sum_{i=1}^{j+1} pi[i] a[j-i+1]
        let mut rhs = pi[j] - pi[0] * a[j];
        for i in 1..=j {
            rhs -= pi[i] * a[j - i + 1];
        }
        pi[j + 1] = rhs / a[0];
    }
    let total: f64 = pi.iter().sum();
    for p in &mut pi {
        *p /= total;
    }
    1.0 - 1.0 / (pi[0] + rho)
}
