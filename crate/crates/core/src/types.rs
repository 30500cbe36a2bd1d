//! Domain values shared by every other module: node identities, timestamps,
//! readings, neighbor lists and the wire envelope exchanged between meters.
//!
//! The reception-flow validation lives here as well, because both the
//! protocol reactor and the tests need to evaluate it without a simulator.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    #[error("malformed timestamp {0:?} (expected yyyy-mm-dd hh:mm:ss)")]
    MalformedTimestamp(String),
    #[error("node id {0} outside 1..=254")]
    InvalidNodeId(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("empty message")]
    Empty,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

/// Identity of a device in the household network.
///
/// The simulated address is `192.168.4.<id>`; ids 0 and 255 are the network
/// and broadcast addresses of that /24 and are therefore not valid devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct NodeId(u8);

impl NodeId {
    /// Node 1 hosts the access point.
    pub const ACCESS_POINT: NodeId = NodeId(1);

    pub fn new(id: u32) -> Result<Self, TypeError> {
        match id {
            1..=254 => Ok(NodeId(id as u8)),
            _ => Err(TypeError::InvalidNodeId(id)),
        }
    }

    pub fn get(self) -> u32 {
        u32::from(self.0)
    }

    pub fn address(self) -> Ipv4Addr {
        Ipv4Addr::new(192, 168, 4, self.0)
    }

    pub fn is_access_point(self) -> bool {
        self == Self::ACCESS_POINT
    }
}

impl TryFrom<u32> for NodeId {
    type Error = TypeError;
    fn try_from(value: u32) -> Result<Self, Self::Error> {
        NodeId::new(value)
    }
}

impl From<NodeId> for u32 {
    fn from(id: NodeId) -> u32 {
        id.get()
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
pub const SECONDS_PER_DAY: i64 = 86_400;

/// Wall-clock instant with one-second resolution, stored as seconds since
/// the Unix epoch. There is no time zone: the meters record local time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_unix(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub const fn unix(self) -> i64 {
        self.0
    }

    pub fn from_naive(dt: NaiveDateTime) -> Self {
        Timestamp(dt.and_utc().timestamp())
    }

    pub fn to_naive(self) -> NaiveDateTime {
        DateTime::from_timestamp(self.0, 0)
            .expect("timestamp within chrono range")
            .naive_utc()
    }

    pub fn start_of_day(date: NaiveDate) -> Self {
        Self::from_naive(date.and_time(NaiveTime::MIN))
    }

    pub fn date(self) -> NaiveDate {
        self.to_naive().date()
    }

    pub fn seconds_of_day(self) -> u32 {
        self.0.rem_euclid(SECONDS_PER_DAY) as u32
    }

    pub fn plus_secs(self, secs: i64) -> Self {
        Timestamp(self.0 + secs)
    }
}

/// Parses exactly `yyyy-mm-dd hh:mm:ss`. Anything else, including missing
/// zero padding or impossible calendar dates, is rejected.
pub fn parse_timestamp(text: &str) -> Result<Timestamp, TypeError> {
    let malformed = || TypeError::MalformedTimestamp(text.to_owned());
    let bytes = text.as_bytes();
    if bytes.len() != 19 {
        return Err(malformed());
    }
    for (i, b) in bytes.iter().enumerate() {
        let ok = match i {
            4 | 7 => *b == b'-',
            10 => *b == b' ',
            13 | 16 => *b == b':',
            _ => b.is_ascii_digit(),
        };
        if !ok {
            return Err(malformed());
        }
    }
    let num = |range: std::ops::Range<usize>| -> u32 {
        bytes[range]
            .iter()
            .fold(0, |acc, b| acc * 10 + u32::from(b - b'0'))
    };
    let date = NaiveDate::from_ymd_opt(num(0..4) as i32, num(5..7), num(8..10)).ok_or_else(malformed)?;
    let time = NaiveTime::from_hms_opt(num(11..13), num(14..16), num(17..19)).ok_or_else(malformed)?;
    Ok(Timestamp::from_naive(date.and_time(time)))
}

pub fn format_timestamp(t: Timestamp) -> String {
    let dt = t.to_naive();
    format!(
        "{:04}-{:02}-{:02} {:02}:{:02}:{:02}",
        dt.year(),
        dt.month(),
        dt.day(),
        dt.hour(),
        dt.minute(),
        dt.second()
    )
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_timestamp(*self))
    }
}

impl FromStr for Timestamp {
    type Err = TypeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_timestamp(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_timestamp(*self))
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_timestamp(&text).map_err(serde::de::Error::custom)
    }
}

/// Simulated instant in microseconds since the Unix epoch.
///
/// Packet-level queueing needs sub-millisecond resolution; protocol-level
/// data is always truncated to whole seconds through [`SimTime::timestamp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(i64);

impl SimTime {
    pub const MICROS_PER_SEC: i64 = 1_000_000;

    pub const fn from_micros(us: i64) -> Self {
        SimTime(us)
    }

    pub const fn micros(self) -> i64 {
        self.0
    }

    pub fn from_timestamp(t: Timestamp) -> Self {
        SimTime(t.unix() * Self::MICROS_PER_SEC)
    }

    pub fn timestamp(self) -> Timestamp {
        Timestamp::from_unix(self.0.div_euclid(Self::MICROS_PER_SEC))
    }

    pub fn plus_micros(self, us: i64) -> Self {
        SimTime(self.0 + us)
    }

    pub fn plus_secs_f64(self, secs: f64) -> Self {
        SimTime(self.0 + (secs * Self::MICROS_PER_SEC as f64).round() as i64)
    }

    pub fn secs_since(self, earlier: SimTime) -> f64 {
        (self.0 - earlier.0) as f64 / Self::MICROS_PER_SEC as f64
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let millis = self.0.rem_euclid(Self::MICROS_PER_SEC) / 1000;
        write!(f, "{}.{:03}", self.timestamp(), millis)
    }
}

impl Serialize for SimTime {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SimTime {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let (secs, millis) = text
            .split_once('.')
            .ok_or_else(|| serde::de::Error::custom("missing millisecond part"))?;
        let base = parse_timestamp(secs).map_err(serde::de::Error::custom)?;
        let millis: i64 = millis.parse().map_err(serde::de::Error::custom)?;
        Ok(SimTime::from_timestamp(base).plus_micros(millis * 1000))
    }
}

/// One consumption sample: the `("time", "value")` pair stored per source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reading {
    pub time: Timestamp,
    /// Watts.
    pub value: f64,
}

impl Reading {
    pub fn new(time: Timestamp, value: f64) -> Self {
        Reading { time, value }
    }
}

/// The household devices a node knows about, kept sorted and free of
/// duplicates. A node's own list never contains itself.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NeighborList(Vec<NodeId>);

impl NeighborList {
    pub fn new(ids: impl IntoIterator<Item = NodeId>) -> Self {
        let set: BTreeSet<NodeId> = ids.into_iter().collect();
        NeighborList(set.into_iter().collect())
    }

    /// Neighbors of `owner` in a household made of `members`.
    pub fn for_member(owner: NodeId, members: impl IntoIterator<Item = NodeId>) -> Self {
        Self::new(members.into_iter().filter(|id| *id != owner))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The list completed with `owner`, i.e. the whole household as seen
    /// by that device.
    pub fn with(&self, owner: NodeId) -> BTreeSet<NodeId> {
        self.iter().chain(std::iter::once(owner)).collect()
    }

    pub fn as_slice(&self) -> &[NodeId] {
        &self.0
    }
}

impl FromIterator<NodeId> for NeighborList {
    fn from_iter<T: IntoIterator<Item = NodeId>>(iter: T) -> Self {
        NeighborList::new(iter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    ReadingBroadcast,
    DataRequest,
    DataResponse,
    Ack,
}

/// A message between meters.
///
/// `time` is kept as the text that travelled on the wire so the receiver can
/// apply the time-format check itself. The meaning of `value` depends on the
/// kind: the reading for a broadcast, 1/0 for an ack, and the id of the node
/// whose series is requested for data requests and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub kind: MessageKind,
    pub node: NodeId,
    pub time: String,
    pub value: f64,
    pub neighbors: NeighborList,
    /// Present only on data responses.
    pub series: Option<Vec<Reading>>,
}

impl Envelope {
    pub fn broadcast(node: NodeId, reading: Reading, neighbors: &NeighborList) -> Self {
        Envelope {
            kind: MessageKind::ReadingBroadcast,
            node,
            time: format_timestamp(reading.time),
            value: reading.value,
            neighbors: neighbors.clone(),
            series: None,
        }
    }

    /// Acknowledges the broadcast carrying `time`.
    pub fn ack(node: NodeId, time: &str, ok: bool, neighbors: &NeighborList) -> Self {
        Envelope {
            kind: MessageKind::Ack,
            node,
            time: time.to_owned(),
            value: if ok { 1.0 } else { 0.0 },
            neighbors: neighbors.clone(),
            series: None,
        }
    }

    pub fn data_request(
        node: NodeId,
        source: NodeId,
        day: Timestamp,
        neighbors: &NeighborList,
    ) -> Self {
        Envelope {
            kind: MessageKind::DataRequest,
            node,
            time: format_timestamp(day),
            value: f64::from(source.get()),
            neighbors: neighbors.clone(),
            series: None,
        }
    }

    pub fn data_response(
        node: NodeId,
        source: NodeId,
        day: Timestamp,
        series: Vec<Reading>,
        neighbors: &NeighborList,
    ) -> Self {
        Envelope {
            kind: MessageKind::DataResponse,
            node,
            time: format_timestamp(day),
            value: f64::from(source.get()),
            neighbors: neighbors.clone(),
            series: Some(series),
        }
    }

    /// The carried reading, if both fields are well formed.
    pub fn reading(&self) -> Option<Reading> {
        let time = parse_timestamp(&self.time).ok()?;
        self.value.is_finite().then_some(Reading::new(time, self.value))
    }

    pub fn ack_ok(&self) -> Option<bool> {
        (self.kind == MessageKind::Ack).then_some(self.value == 1.0)
    }

    /// Source node named by a data request or response.
    pub fn subject(&self) -> Option<NodeId> {
        if !matches!(self.kind, MessageKind::DataRequest | MessageKind::DataResponse) {
            return None;
        }
        if self.value.fract() != 0.0 || !(1.0..=254.0).contains(&self.value) {
            return None;
        }
        NodeId::new(self.value as u32).ok()
    }
}

/// Reply to a reading broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
}

/// Outcome of the three reception checks, kept separately for logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validation {
    pub known_node: bool,
    pub time_format: bool,
    pub numeric_value: bool,
}

impl Validation {
    pub fn of(env: &Envelope, known_nodes: &NeighborList) -> Self {
        Validation {
            known_node: known_nodes.contains(env.node),
            time_format: parse_timestamp(&env.time).is_ok(),
            numeric_value: env.value.is_finite(),
        }
    }

    pub fn passed(self) -> bool {
        self.known_node && self.time_format && self.numeric_value
    }
}

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut failed = Vec::new();
        if !self.known_node {
            failed.push("unknown node");
        }
        if !self.time_format {
            failed.push("bad time format");
        }
        if !self.numeric_value {
            failed.push("non-numeric value");
        }
        if failed.is_empty() {
            f.write_str("ok")
        } else {
            f.write_str(&failed.join(", "))
        }
    }
}

/// Reception-flow check of a reading broadcast: the sender must be a known
/// node, the time must be canonical, and the value must be a finite number.
pub fn validate_envelope(env: &Envelope, known_nodes: &NeighborList) -> Ack {
    Ack {
        ok: Validation::of(env, known_nodes).passed(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireSample {
    time: String,
    value: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEnvelope {
    kind: MessageKind,
    node: u32,
    time: String,
    value: Option<f64>,
    neighbors: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    series: Option<Vec<WireSample>>,
}

/// Serializes to one UTF-8 JSON document. Non-finite values travel as
/// `null`, which decodes back to NaN and then fails validation.
pub fn encode_envelope(env: &Envelope) -> Vec<u8> {
    let wire = WireEnvelope {
        kind: env.kind,
        node: env.node.get(),
        time: env.time.clone(),
        value: env.value.is_finite().then_some(env.value),
        neighbors: env.neighbors.iter().map(NodeId::get).collect(),
        series: env.series.as_ref().map(|series| {
            series
                .iter()
                .map(|r| WireSample {
                    time: format_timestamp(r.time),
                    value: r.value,
                })
                .collect()
        }),
    };
    serde_json::to_vec(&wire).expect("envelope serialization cannot fail")
}

pub fn decode_envelope(bytes: &[u8]) -> Result<Envelope, DecodeError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(DecodeError::Empty);
    }
    let wire: WireEnvelope =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let invalid = |field: &'static str, reason: String| DecodeError::InvalidField { field, reason };

    let node = NodeId::new(wire.node).map_err(|e| invalid("node", e.to_string()))?;
    let mut neighbors = Vec::with_capacity(wire.neighbors.len());
    for raw in &wire.neighbors {
        neighbors.push(NodeId::new(*raw).map_err(|e| invalid("neighbors", e.to_string()))?);
    }
    let neighbor_list = NeighborList::new(neighbors.iter().copied());
    if neighbor_list.len() != neighbors.len() {
        return Err(invalid("neighbors", "duplicate entries".into()));
    }

    let series = match (wire.kind, wire.series) {
        (MessageKind::DataResponse, Some(samples)) => {
            let mut out = Vec::with_capacity(samples.len());
            for s in samples {
                let time = parse_timestamp(&s.time).map_err(|e| invalid("series", e.to_string()))?;
                out.push(Reading::new(time, s.value));
            }
            Some(out)
        }
        (MessageKind::DataResponse, None) => {
            return Err(invalid("series", "required on data_response".into()))
        }
        (_, Some(_)) => return Err(invalid("series", "only allowed on data_response".into())),
        (_, None) => None,
    };

    Ok(Envelope {
        kind: wire.kind,
        node,
        time: wire.time,
        value: wire.value.unwrap_or(f64::NAN),
        neighbors: neighbor_list,
        series,
    })
}
