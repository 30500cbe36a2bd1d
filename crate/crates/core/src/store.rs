//! Per-node reading store.
//!
//! Every meter keeps its own readings plus one collection per remote node.
//! Remote collections are evicted after the retention window; the owner's
//! collection is kept for good. Range operations are half-open `[start, end)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::ops::Bound;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{format_timestamp, parse_timestamp, NodeId, Reading, Timestamp, SECONDS_PER_DAY};

pub const DEFAULT_RETENTION_SECS: i64 = 14 * SECONDS_PER_DAY;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid range: start {start} is after end {end}")]
    InvalidRange { start: Timestamp, end: Timestamp },
    #[error("store file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("store file {path} line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Readings of one node over one calendar day, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct DaySeries {
    pub source: NodeId,
    pub date: NaiveDate,
    pub samples: Vec<Reading>,
}

impl DaySeries {
    pub fn new(source: NodeId, date: NaiveDate, samples: Vec<Reading>) -> Self {
        debug_assert!(samples.iter().all(|r| r.time.date() == date));
        debug_assert!(samples.windows(2).all(|w| w[0].time < w[1].time));
        DaySeries { source, date, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|r| r.value).collect()
    }

    pub fn value_at(&self, time: Timestamp) -> Option<f64> {
        self.samples
            .binary_search_by_key(&time, |r| r.time)
            .ok()
            .map(|i| self.samples[i].value)
    }
}

type Collection = BTreeMap<Timestamp, f64>;

/// Append-plus-compaction file backing: inserts append a line, mutations
/// that rewrite history compact the whole collection file.
#[derive(Debug, Clone)]
struct FileBacking {
    dir: PathBuf,
}

impl FileBacking {
    fn path(&self, owner: NodeId, source: NodeId) -> PathBuf {
        self.dir.join(collection_file_name(owner, source))
    }

    fn append(&self, owner: NodeId, source: NodeId, r: Reading) -> Result<(), StoreError> {
        let path = self.path(owner, source);
        let io_err = |source| StoreError::Io { path: path.clone(), source };
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        writeln!(file, "{},{}", format_timestamp(r.time), r.value).map_err(io_err)
    }

    fn compact(&self, owner: NodeId, source: NodeId, coll: &Collection) -> Result<(), StoreError> {
        let path = self.path(owner, source);
        let tmp = path.with_extension("csv.tmp");
        let mut text = String::with_capacity(coll.len() * 28);
        for (t, v) in coll {
            text.push_str(&format!("{},{}\n", format_timestamp(*t), v));
        }
        let io_err = |source| StoreError::Io { path: path.clone(), source };
        fs::write(&tmp, text).map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)
    }
}

pub fn collection_file_name(owner: NodeId, source: NodeId) -> String {
    format!("node{owner}_src{source}.csv")
}

#[derive(Debug, Clone)]
pub struct MeterStore {
    owner: NodeId,
    collections: BTreeMap<NodeId, Collection>,
    retention_secs: i64,
    backing: Option<FileBacking>,
}

impl MeterStore {
    pub fn new(owner: NodeId) -> Self {
        Self::with_retention(owner, DEFAULT_RETENTION_SECS)
    }

    pub fn with_retention(owner: NodeId, retention_secs: i64) -> Self {
        MeterStore {
            owner,
            collections: BTreeMap::new(),
            retention_secs,
            backing: None,
        }
    }

    /// Mirrors every collection into `dir`, writing what is already held.
    pub fn persist_to(&mut self, dir: impl Into<PathBuf>) -> Result<(), StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| StoreError::Io { path: dir.clone(), source })?;
        let backing = FileBacking { dir };
        for (source, coll) in &self.collections {
            backing.compact(self.owner, *source, coll)?;
        }
        self.backing = Some(backing);
        Ok(())
    }

    /// Rebuilds a store from the files written by [`MeterStore::persist_to`].
    /// Later lines win over earlier ones with the same timestamp.
    pub fn load(dir: &Path, owner: NodeId, retention_secs: i64) -> Result<Self, StoreError> {
        let mut store = Self::with_retention(owner, retention_secs);
        let prefix = format!("node{owner}_src");
        let entries = fs::read_dir(dir).map_err(|source| StoreError::Io { path: dir.into(), source })?;
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for path in paths {
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(id) = name.strip_prefix(&prefix).and_then(|rest| rest.strip_suffix(".csv")) else {
                continue;
            };
            let corrupt = |line: usize, reason: String| StoreError::Corrupt { path: path.clone(), line, reason };
            let source = id
                .parse::<u32>()
                .ok()
                .and_then(|raw| NodeId::new(raw).ok())
                .ok_or_else(|| corrupt(0, format!("bad source id in file name {name}")))?;
            let file = fs::File::open(&path).map_err(|e| StoreError::Io { path: path.clone(), source: e })?;
            let coll = store.collections.entry(source).or_default();
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| StoreError::Io { path: path.clone(), source: e })?;
                if line.trim().is_empty() {
                    continue;
                }
                let (t, v) = line
                    .split_once(',')
                    .ok_or_else(|| corrupt(idx + 1, "missing comma".into()))?;
                let time = parse_timestamp(t).map_err(|e| corrupt(idx + 1, e.to_string()))?;
                let value: f64 = v.parse().map_err(|_| corrupt(idx + 1, format!("bad value {v:?}")))?;
                coll.insert(time, value);
            }
        }
        Ok(store)
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn retention_secs(&self) -> i64 {
        self.retention_secs
    }

    pub fn sources(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.collections.keys().copied()
    }

    pub fn len(&self, source: NodeId) -> usize {
        self.collections.get(&source).map_or(0, BTreeMap::len)
    }

    pub fn readings(&self, source: NodeId) -> impl Iterator<Item = Reading> + '_ {
        self.collections
            .get(&source)
            .into_iter()
            .flat_map(|c| c.iter().map(|(t, v)| Reading::new(*t, *v)))
    }

    pub fn get(&self, source: NodeId, time: Timestamp) -> Option<f64> {
        self.collections.get(&source)?.get(&time).copied()
    }

    pub fn last_time(&self, source: NodeId) -> Option<Timestamp> {
        self.collections.get(&source)?.keys().next_back().copied()
    }

    /// Stores `r` under `source`. A reading with an existing timestamp
    /// replaces the stored value.
    pub fn insert(&mut self, source: NodeId, r: Reading) -> Result<(), StoreError> {
        let coll = self.collections.entry(source).or_default();
        if coll.get(&r.time) == Some(&r.value) {
            return Ok(());
        }
        let appended_at_end = coll.keys().next_back().is_none_or(|last| *last < r.time);
        coll.insert(r.time, r.value);
        if let Some(backing) = &self.backing {
            if appended_at_end {
                backing.append(self.owner, source, r)?;
            } else {
                backing.compact(self.owner, source, coll)?;
            }
        }
        Ok(())
    }

    pub fn query_day(&self, source: NodeId, date: NaiveDate) -> DaySeries {
        let start = Timestamp::start_of_day(date);
        let end = start.plus_secs(SECONDS_PER_DAY);
        let samples = self
            .collections
            .get(&source)
            .map(|c| c.range(start..end).map(|(t, v)| Reading::new(*t, *v)).collect())
            .unwrap_or_default();
        DaySeries::new(source, date, samples)
    }

    /// Copy of the readings of `source` in `[start, end)`.
    pub fn snapshot_range(
        &self,
        source: NodeId,
        start: Timestamp,
        end: Timestamp,
    ) -> Result<Vec<Reading>, StoreError> {
        check_range(start, end)?;
        Ok(self
            .collections
            .get(&source)
            .map(|c| c.range(start..end).map(|(t, v)| Reading::new(*t, *v)).collect())
            .unwrap_or_default())
    }

    /// Replaces the value of every reading of `source` in `[start, end)`.
    /// Timestamps are left alone. Returns the number of readings touched.
    pub fn overwrite_range(
        &mut self,
        source: NodeId,
        start: Timestamp,
        end: Timestamp,
        value: f64,
    ) -> Result<usize, StoreError> {
        check_range(start, end)?;
        let Some(coll) = self.collections.get_mut(&source) else {
            return Ok(0);
        };
        let mut count = 0;
        for (_, v) in coll.range_mut(start..end) {
            *v = value;
            count += 1;
        }
        if count > 0 {
            if let Some(backing) = &self.backing {
                backing.compact(self.owner, source, coll)?;
            }
        }
        Ok(count)
    }

    /// Writes back previously snapshotted readings (authorised restoration).
    pub fn restore(&mut self, source: NodeId, readings: &[Reading]) -> Result<usize, StoreError> {
        let coll = self.collections.entry(source).or_default();
        for r in readings {
            coll.insert(r.time, r.value);
        }
        if let Some(backing) = &self.backing {
            backing.compact(self.owner, source, coll)?;
        }
        Ok(readings.len())
    }

    /// Drops remote readings strictly older than `now - retention`.
    pub fn evict_expired(&mut self, now: Timestamp) -> Result<usize, StoreError> {
        let cutoff = now.plus_secs(-self.retention_secs);
        let mut removed = 0;
        for (source, coll) in self.collections.iter_mut() {
            if *source == self.owner {
                continue;
            }
            let keep = coll.split_off(&cutoff);
            let dropped = coll.len();
            *coll = keep;
            if dropped > 0 {
                removed += dropped;
                if let Some(backing) = &self.backing {
                    backing.compact(self.owner, *source, coll)?;
                }
            }
        }
        Ok(removed)
    }

    /// SHA-256 over the canonical `time,value` lines of `source`, restricted
    /// to readings at or before `until` when given.
    pub fn digest(&self, source: NodeId, until: Option<Timestamp>) -> String {
        let mut hasher = Sha256::new();
        if let Some(coll) = self.collections.get(&source) {
            let upper = until.map_or(Bound::Unbounded, Bound::Included);
            for (t, v) in coll.range((Bound::Unbounded, upper)) {
                hasher.update(format!("{},{}\n", format_timestamp(*t), v).as_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// True when every collection is strictly time ordered. Holds by
    /// construction; kept for invariant scans in tests and reports.
    pub fn is_consistent(&self) -> bool {
        self.collections
            .values()
            .all(|c| c.keys().zip(c.keys().skip(1)).all(|(a, b)| a < b))
    }
}

fn check_range(start: Timestamp, end: Timestamp) -> Result<(), StoreError> {
    if start > end {
        Err(StoreError::InvalidRange { start, end })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn id(i: u32) -> NodeId {
        NodeId::new(i).unwrap()
    }

    fn ts(text: &str) -> Timestamp {
        parse_timestamp(text).unwrap()
    }

    fn table3() -> Vec<Reading> {
        [
            ("2019-06-30 18:00:02", 30.0),
            ("2019-06-30 18:00:09", 10.0),
            ("2019-06-30 18:00:17", 30.0),
            ("2019-06-30 18:00:24", 10.0),
            ("2019-06-30 18:00:32", 30.0),
        ]
        .iter()
        .map(|(t, v)| Reading::new(ts(t), *v))
        .collect()
    }

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2019, 6, 30).unwrap()
    }

    fn table3_store() -> MeterStore {
        let mut s = MeterStore::new(id(1));
        for r in table3() {
            s.insert(id(1), r).unwrap();
        }
        s
    }

    #[test]
    fn insert_and_query_table3() {
        let s = table3_store();
        let series = s.query_day(id(1), day());
        assert_eq!(series.len(), 5);
        assert_eq!(series.samples[0], Reading::new(ts("2019-06-30 18:00:02"), 30.0));
        assert!(MeterStore::new(id(1)).query_day(id(1), day()).is_empty());
    }

    #[test]
    fn insert_is_idempotent_and_last_writer_wins() {
        let mut s = table3_store();
        s.insert(id(1), table3()[0]).unwrap();
        assert_eq!(s.len(id(1)), 5);
        s.insert(id(1), Reading::new(table3()[0].time, 31.0)).unwrap();
        assert_eq!(s.len(id(1)), 5);
        assert_eq!(s.get(id(1), table3()[0].time), Some(31.0));
    }

    #[test]
    fn random_order_inserts_come_back_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = ts("2019-06-30 00:00:00");
        let mut readings: Vec<Reading> = (0..1000)
            .map(|i| Reading::new(base.plus_secs(i * 37), i as f64))
            .collect();
        let mut expected = readings.clone();
        readings.shuffle(&mut rng);
        let mut s = MeterStore::new(id(2));
        for r in &readings {
            s.insert(id(3), *r).unwrap();
        }
        expected.sort_by_key(|r| r.time);
        let got: Vec<Reading> = s.readings(id(3)).collect();
        assert_eq!(got, expected);
        assert!(s.is_consistent());
    }

    #[test]
    fn day_query_splits_at_midnight() {
        let mut s = MeterStore::new(id(1));
        let all: Vec<Reading> = (0..200)
            .map(|i| Reading::new(ts("2019-06-30 23:50:00").plus_secs(i * 7), i as f64))
            .collect();
        for r in &all {
            s.insert(id(2), *r).unwrap();
        }
        for date in [day(), day().succ_opt().unwrap()] {
            let oracle: Vec<Reading> = all.iter().copied().filter(|r| r.time.date() == date).collect();
            assert_eq!(s.query_day(id(2), date).samples, oracle);
        }
    }

    #[test]
    fn overwrite_table3_window() {
        let mut s = table3_store();
        let before = s.snapshot_range(id(1), ts("2019-06-30 18:00:15"), ts("2019-06-30 18:00:30")).unwrap();
        assert_eq!(
            before,
            vec![
                Reading::new(ts("2019-06-30 18:00:17"), 30.0),
                Reading::new(ts("2019-06-30 18:00:24"), 10.0)
            ]
        );
        let n = s
            .overwrite_range(id(1), ts("2019-06-30 18:00:15"), ts("2019-06-30 18:00:30"), 0.0)
            .unwrap();
        assert_eq!(n, 2);
        let values = s.query_day(id(1), day()).values();
        assert_eq!(values, vec![30.0, 10.0, 0.0, 0.0, 30.0]);
        s.restore(id(1), &before).unwrap();
        assert_eq!(s.query_day(id(1), day()).samples, table3());
    }

    #[test]
    fn overwrite_edges() {
        let mut s = table3_store();
        let t = ts("2019-06-30 18:00:17");
        assert_eq!(s.overwrite_range(id(1), t, t, 0.0).unwrap(), 0);
        assert_eq!(s.query_day(id(1), day()).samples, table3());
        assert!(matches!(
            s.overwrite_range(id(1), t.plus_secs(1), t, 0.0),
            Err(StoreError::InvalidRange { .. })
        ));
        assert!(s.snapshot_range(id(1), t, t).unwrap().is_empty());
        // end bound excluded
        assert_eq!(s.overwrite_range(id(1), ts("2019-06-30 18:00:09"), t, 5.0).unwrap(), 1);
        assert_eq!(s.get(id(1), t), Some(30.0));
    }

    #[test]
    fn eviction_spares_owner_and_boundary() {
        let now = ts("2019-07-14 12:00:00");
        let mut s = MeterStore::new(id(1));
        let old = now.plus_secs(-15 * SECONDS_PER_DAY);
        let exact = now.plus_secs(-14 * SECONDS_PER_DAY);
        s.insert(id(1), Reading::new(old, 1.0)).unwrap();
        s.insert(id(2), Reading::new(old, 2.0)).unwrap();
        s.insert(id(2), Reading::new(exact, 3.0)).unwrap();
        s.insert(id(3), Reading::new(now, 4.0)).unwrap();
        assert_eq!(s.evict_expired(now).unwrap(), 1);
        assert_eq!(s.get(id(1), old), Some(1.0));
        assert_eq!(s.get(id(2), old), None);
        assert_eq!(s.get(id(2), exact), Some(3.0));
        assert_eq!(s.evict_expired(now).unwrap(), 0);
    }

    #[test]
    fn file_backing_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = table3_store();
        s.persist_to(dir.path()).unwrap();
        s.insert(id(2), Reading::new(ts("2019-06-30 18:00:05"), 12.5)).unwrap();
        s.insert(id(1), Reading::new(ts("2019-06-30 18:00:39"), 10.0)).unwrap();
        s.overwrite_range(id(1), ts("2019-06-30 18:00:15"), ts("2019-06-30 18:00:30"), 0.0)
            .unwrap();
        let text = fs::read_to_string(dir.path().join("node1_src1.csv")).unwrap();
        assert!(text.starts_with("2019-06-30 18:00:02,30\n"));
        let loaded = MeterStore::load(dir.path(), id(1), DEFAULT_RETENTION_SECS).unwrap();
        for src in [id(1), id(2)] {
            assert_eq!(loaded.digest(src, None), s.digest(src, None));
        }
    }

    #[test]
    fn digest_respects_cutoff() {
        let s = table3_store();
        let mut other = MeterStore::new(id(1));
        for r in &table3()[..3] {
            other.insert(id(1), *r).unwrap();
        }
        let cut = ts("2019-06-30 18:00:17");
        assert_eq!(s.digest(id(1), Some(cut)), other.digest(id(1), None));
        assert_ne!(s.digest(id(1), None), other.digest(id(1), None));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u32, i64, f64),
        Overwrite(u32, i64, i64, f64),
        Evict(i64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (1u32..4, 0i64..40 * SECONDS_PER_DAY, 0f64..500.0).prop_map(|(s, t, v)| Op::Insert(s, t, v)),
            (1u32..4, 0i64..40 * SECONDS_PER_DAY, 0i64..SECONDS_PER_DAY, 0f64..5.0)
                .prop_map(|(s, t, d, v)| Op::Overwrite(s, t, t + d, v)),
            (0i64..40 * SECONDS_PER_DAY).prop_map(Op::Evict),
        ]
    }

    proptest! {
        #[test]
        fn invariants_hold_under_random_ops(ops in proptest::collection::vec(op(), 1..60)) {
            let mut s = MeterStore::new(id(1));
            for op in ops {
                match op {
                    Op::Insert(src, t, v) => s.insert(id(src), Reading::new(Timestamp::from_unix(t), v)).unwrap(),
                    Op::Overwrite(src, a, b, v) => {
                        let (a, b) = (Timestamp::from_unix(a), Timestamp::from_unix(b));
                        s.overwrite_range(id(src), a, b, v).unwrap();
                        prop_assert!(s.snapshot_range(id(src), a, b).unwrap().iter().all(|r| r.value == v));
                    }
                    Op::Evict(now) => {
                        let now = Timestamp::from_unix(now);
                        s.evict_expired(now).unwrap();
                        prop_assert_eq!(s.evict_expired(now).unwrap(), 0);
                        let cutoff = now.plus_secs(-DEFAULT_RETENTION_SECS);
                        for src in [2, 3] {
                            prop_assert!(s.readings(id(src)).all(|r| r.time >= cutoff));
                        }
                    }
                }
                prop_assert!(s.is_consistent());
            }
        }
    }
}
