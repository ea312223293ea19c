//! Time-series storage keyed by (metric, tags), range queries, bucket
//! aggregation, and the bridge that drains the ingest bus into storage.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::Source;
use crate::pipeline::{BusError, IngestBus, Metric, MetricAllowList, TelemetryRecord};

/// Offsets are committed after every batch of this many records.
pub const BRIDGE_BATCH_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesTags {
    pub host_ip: Ipv4Addr,
    pub interface: String,
    pub src: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub metric: Metric,
    pub tags: SeriesTags,
}

impl SeriesKey {
    pub fn new(metric: Metric, host_ip: Ipv4Addr, interface: impl Into<String>, src: Source) -> Self {
        SeriesKey {
            metric,
            tags: SeriesTags {
                host_ip,
                interface: interface.into(),
                src,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    #[serde(rename = "ts")]
    pub ts_ms: u64,
    pub value: f64,
}

impl DataPoint {
    pub fn new(ts_ms: u64, value: f64) -> Self {
        DataPoint { ts_ms, value }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("point value {0} is not finite")]
    NonFinite(f64),
    #[error("query range start {t0} is after end {t1}")]
    InvalidRange { t0: u64, t1: u64 },
    #[error("bucket width must be positive")]
    ZeroBucket,
    #[error("store unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Inserted,
    Replaced,
    Unchanged,
}

/// Anything the ingest bridge can append to.
pub trait PointSink {
    fn append(&self, key: &SeriesKey, point: DataPoint) -> Result<AppendOutcome, StoreError>;
}

#[derive(Debug, Default)]
pub struct TimeSeriesStore {
    series: RwLock<BTreeMap<SeriesKey, BTreeMap<u64, f64>>>,
}

impl TimeSeriesStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Points with `t0 <= ts < t1`, ascending. Unknown series are empty.
    pub fn query(&self, key: &SeriesKey, t0: u64, t1: u64) -> Result<Vec<DataPoint>, StoreError> {
        if t0 > t1 {
            return Err(StoreError::InvalidRange { t0, t1 });
        }
        let series = self.series.read().expect("store lock");
        Ok(series
            .get(key)
            .map(|s| {
                s.range(t0..t1)
                    .map(|(&ts, &value)| DataPoint { ts_ms: ts, value })
                    .collect()
            })
            .unwrap_or_default())
    }

    /// The last `n` points strictly before `before`, ascending.
    pub fn last_before(&self, key: &SeriesKey, before: u64, n: usize) -> Vec<DataPoint> {
        let series = self.series.read().expect("store lock");
        let mut pts: Vec<DataPoint> = series
            .get(key)
            .map(|s| {
                s.range(..before)
                    .rev()
                    .take(n)
                    .map(|(&ts, &value)| DataPoint { ts_ms: ts, value })
                    .collect()
            })
            .unwrap_or_default();
        pts.reverse();
        pts
    }

    pub fn keys(&self) -> Vec<SeriesKey> {
        self.series.read().expect("store lock").keys().cloned().collect()
    }

    pub fn point_count(&self) -> usize {
        self.series
            .read()
            .expect("store lock")
            .values()
            .map(BTreeMap::len)
            .sum()
    }
}

impl PointSink for TimeSeriesStore {
    /// A second append at the same (key, ts) replaces the value.
    fn append(&self, key: &SeriesKey, point: DataPoint) -> Result<AppendOutcome, StoreError> {
        if !point.value.is_finite() {
            return Err(StoreError::NonFinite(point.value));
        }
        let mut series = self.series.write().expect("store lock");
        let s = series.entry(key.clone()).or_default();
        Ok(match s.insert(point.ts_ms, point.value) {
            None => AppendOutcome::Inserted,
            Some(old) if old.to_bits() == point.value.to_bits() => AppendOutcome::Unchanged,
            Some(_) => AppendOutcome::Replaced,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFn {
    Mean,
    Max,
    Sum,
}

impl std::str::FromStr for AggFn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(AggFn::Mean),
            "max" => Ok(AggFn::Max),
            "sum" => Ok(AggFn::Sum),
            other => Err(format!("unknown aggregation {other:?}")),
        }
    }
}

/// Groups points into `floor(ts / bucket) * bucket` buckets and reduces each.
/// Empty buckets are omitted.
pub fn aggregate(points: &[DataPoint], bucket_ms: u64, f: AggFn) -> Result<Vec<DataPoint>, StoreError> {
    if bucket_ms == 0 {
        return Err(StoreError::ZeroBucket);
    }
    let mut buckets: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for p in points {
        buckets
            .entry(p.ts_ms / bucket_ms * bucket_ms)
            .or_default()
            .push(p.value);
    }
    Ok(buckets
        .into_iter()
        .map(|(ts, vals)| {
            let value = match f {
                AggFn::Sum => vals.iter().sum(),
                AggFn::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                AggFn::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            DataPoint { ts_ms: ts, value }
        })
        .collect())
}

/// `metric host_ip interface src ts_ms value`
pub fn format_journal_line(key: &SeriesKey, p: &DataPoint) -> String {
    format!(
        "{} {} {} {} {} {}",
        key.metric, key.tags.host_ip, key.tags.interface, key.tags.src, p.ts_ms, p.value
    )
}

pub fn parse_journal_line(line: &str) -> Result<(SeriesKey, DataPoint), String> {
    let fields: Vec<&str> = line.split(' ').collect();
    let [metric, ip, iface, src, ts, value] = fields[..] else {
        return Err(format!("expected 6 fields, got {}", fields.len()));
    };
    if iface.is_empty() {
        return Err("empty interface".into());
    }
    let value: f64 = value.parse().map_err(|e| format!("value: {e}"))?;
    if !value.is_finite() {
        return Err("non-finite value".into());
    }
    Ok((
        SeriesKey::new(
            metric.parse()?,
            ip.parse().map_err(|e| format!("host_ip: {e}"))?,
            iface,
            src.parse()?,
        ),
        DataPoint {
            ts_ms: ts.parse().map_err(|e| format!("ts: {e}"))?,
            value,
        },
    ))
}

/// One data point per allow-listed counter metric.
pub fn explode(record: &TelemetryRecord, allow: &MetricAllowList) -> Vec<(SeriesKey, DataPoint)> {
    allow
        .iter()
        .map(|m| {
            (
                SeriesKey::new(m, record.host_ip, &record.type_instance, record.src),
                DataPoint::new(record.timestamp, record.metric(m) as f64),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BridgeError {
    #[error("store rejected point; consumption paused at {topic}@{offset}: {source}")]
    Store {
        topic: String,
        offset: u64,
        source: StoreError,
    },
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BridgeStats {
    pub records: u64,
    pub appended: u64,
}

/// Reader-tracked consumer that moves bus records into a store. Offsets are
/// committed only after a whole batch has been appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestBridge {
    topics: Vec<String>,
    offsets: BTreeMap<String, u64>,
    allow: MetricAllowList,
    batch_size: usize,
}

impl IngestBridge {
    pub fn new(topics: Vec<String>, allow: MetricAllowList) -> Self {
        Self::with_batch_size(topics, allow, BRIDGE_BATCH_SIZE)
    }

    pub fn with_batch_size(topics: Vec<String>, allow: MetricAllowList, batch_size: usize) -> Self {
        let offsets = topics.iter().map(|t| (t.clone(), 0)).collect();
        IngestBridge {
            topics,
            offsets,
            allow,
            batch_size: batch_size.max(1),
        }
    }

    pub fn offset(&self, topic: &str) -> u64 {
        self.offsets.get(topic).copied().unwrap_or(0)
    }

    /// Drains every topic to its current end. `observe` sees each append.
    pub fn drain<S, F>(&mut self, bus: &IngestBus, store: &S, mut observe: F) -> Result<BridgeStats, BridgeError>
    where
        S: PointSink + ?Sized,
        F: FnMut(&SeriesKey, &DataPoint, AppendOutcome),
    {
        let mut stats = BridgeStats::default();
        for topic in &self.topics {
            loop {
                let from = self.offsets[topic];
                let (records, next) = match bus.consume(topic, from, self.batch_size) {
                    Ok(r) => r,
                    Err(BusError::UnknownTopic(_)) => break,
                    Err(e) => return Err(e.into()),
                };
                if records.is_empty() {
                    break;
                }
                for (i, rec) in records.iter().enumerate() {
                    for (key, point) in explode(rec, &self.allow) {
                        let outcome = store.append(&key, point).map_err(|source| BridgeError::Store {
                            topic: topic.clone(),
                            offset: from + i as u64,
                            source,
                        })?;
                        observe(&key, &point, outcome);
                        stats.appended += 1;
                    }
                    stats.records += 1;
                }
                self.offsets.insert(topic.clone(), next);
            }
        }
        Ok(stats)
    }
}

/// Handle to a background bridge thread.
pub struct BridgeTask {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<(IngestBridge, Option<BridgeError>)>>,
}

impl BridgeTask {
    /// Stops the task and returns the bridge (with its committed offsets) and
    /// the error that paused it, if any.
    pub fn stop(mut self) -> (IngestBridge, Option<BridgeError>) {
        self.stop.store(true, Ordering::SeqCst);
        self.handle
            .take()
            .expect("joined once")
            .join()
            .expect("bridge thread panicked")
    }
}

impl Drop for BridgeTask {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Runs `bridge` continuously until stopped. A store failure pauses
/// consumption; the next drain retries from the last committed offset.
pub fn spawn_ingest_bridge<S>(
    mut bridge: IngestBridge,
    bus: Arc<IngestBus>,
    store: Arc<S>,
    poll_interval: Duration,
) -> BridgeTask
where
    S: PointSink + Send + Sync + 'static,
{
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let handle = std::thread::spawn(move || {
        loop {
            // read the flag first so everything published before stop() is drained
            let stopping = flag.load(Ordering::SeqCst);
            let last_err = bridge.drain(&bus, &*store, |_, _, _| {}).err();
            if stopping {
                return (bridge, last_err);
            }
            std::thread::sleep(poll_interval);
        }
    });
    BridgeTask {
        stop,
        handle: Some(handle),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collector::RawSample;
    use crate::netsim::CounterSet;
    use crate::pipeline::{encode, ingest};
    use proptest::prelude::*;
    use std::sync::atomic::AtomicUsize;

    const H: u64 = 3_600_000;

    fn key() -> SeriesKey {
        SeriesKey::new(Metric::OutOctets, Ipv4Addr::new(10, 0, 0, 10), "FastEthernet0_1", Source::Collectd)
    }

    fn reference_record() -> TelemetryRecord {
        let s = RawSample {
            src: Source::Collectd,
            host_ip: Ipv4Addr::new(10, 0, 0, 10),
            interface: "FastEthernet0_1".into(),
            counters: CounterSet {
                in_octets: 18_050_215,
                out_octets: 18_102_066,
                in_pkts: 77_062,
                out_pkts: 77_063,
                in_discards: 0,
                out_discards: 0,
            },
            timestamp_ms: 1_523_138_724_218,
        };
        encode(&(&s).into()).unwrap()
    }

    #[test]
    fn append_query_identity() {
        let s = TimeSeriesStore::new();
        assert!(s.query(&key(), 0, u64::MAX).unwrap().is_empty());
        assert_eq!(s.append(&key(), DataPoint::new(10, 1.5)).unwrap(), AppendOutcome::Inserted);
        assert_eq!(s.query(&key(), 0, 11).unwrap(), vec![DataPoint::new(10, 1.5)]);
        assert_eq!(s.append(&key(), DataPoint::new(10, 1.5)).unwrap(), AppendOutcome::Unchanged);
        assert_eq!(s.point_count(), 1);
        assert_eq!(s.append(&key(), DataPoint::new(10, 2.5)).unwrap(), AppendOutcome::Replaced);
        assert_eq!(s.query(&key(), 0, 11).unwrap(), vec![DataPoint::new(10, 2.5)]);
    }

    #[test]
    fn non_finite_rejected() {
        let s = TimeSeriesStore::new();
        assert!(matches!(
            s.append(&key(), DataPoint::new(1, f64::INFINITY)),
            Err(StoreError::NonFinite(_))
        ));
        assert_eq!(s.point_count(), 0);
    }

    #[test]
    fn half_open_ranges() {
        let s = TimeSeriesStore::new();
        for ts in [5, 10, 15, 20] {
            s.append(&key(), DataPoint::new(ts, ts as f64)).unwrap();
        }
        let got: Vec<u64> = s.query(&key(), 5, 20).unwrap().iter().map(|p| p.ts_ms).collect();
        assert_eq!(got, vec![5, 10, 15]);
        assert!(s.query(&key(), 10, 10).unwrap().is_empty());
        assert_eq!(
            s.query(&key(), 11, 10),
            Err(StoreError::InvalidRange { t0: 11, t1: 10 })
        );
        assert_eq!(
            s.last_before(&key(), 20, 2).iter().map(|p| p.ts_ms).collect::<Vec<_>>(),
            vec![10, 15]
        );
    }

    #[test]
    fn aggregate_examples() {
        let constant: Vec<_> = (0..10).map(|i| DataPoint::new(i * H / 3, 0.4)).collect();
        assert!(aggregate(&constant, H, AggFn::Mean).unwrap().iter().all(|p| (p.value - 0.4).abs() < 1e-12));

        // 09:10 and 09:40
        let pts = [
            DataPoint::new(9 * H + 10 * 60_000, 0.2),
            DataPoint::new(9 * H + 40 * 60_000, 0.4),
        ];
        let out = aggregate(&pts, H, AggFn::Mean).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].ts_ms, 9 * H);
        assert!((out[0].value - 0.3).abs() < 1e-12);

        let pts = [DataPoint::new(1, 1.0), DataPoint::new(2, 2.0), DataPoint::new(3, 3.0)];
        assert_eq!(aggregate(&pts, H, AggFn::Sum).unwrap(), vec![DataPoint::new(0, 6.0)]);
        assert_eq!(aggregate(&pts, H, AggFn::Max).unwrap(), vec![DataPoint::new(0, 3.0)]);
        assert_eq!(aggregate(&pts, 0, AggFn::Max), Err(StoreError::ZeroBucket));

        let gap = [DataPoint::new(0, 1.0), DataPoint::new(5 * H, 2.0)];
        assert_eq!(aggregate(&gap, H, AggFn::Sum).unwrap().len(), 2);
    }

    #[test]
    fn journal_line_round_trip() {
        let p = DataPoint::new(1_523_138_724_218, 18_102_066.0);
        let line = format_journal_line(&key(), &p);
        assert_eq!(line, "outOctets 10.0.0.10 FastEthernet0_1 collectd 1523138724218 18102066");
        assert_eq!(parse_journal_line(&line).unwrap(), (key(), p));
        let frac = DataPoint::new(3, 0.1 + 0.2);
        assert_eq!(parse_journal_line(&format_journal_line(&key(), &frac)).unwrap().1, frac);
        assert!(parse_journal_line("outOctets 10.0.0.10 Fa0 collectd 12").is_err());
        assert!(parse_journal_line("bogus 10.0.0.10 Fa0 collectd 12 1").is_err());
        assert!(parse_journal_line("outOctets 10.0.0.10 Fa0 collectd 12 NaN").is_err());
    }

    #[test]
    fn reference_record_explodes_to_six_points() {
        let bus = IngestBus::new();
        bus.publish("collectd", reference_record()).unwrap();
        let store = TimeSeriesStore::new();
        let mut bridge = IngestBridge::new(crate::pipeline::default_topics(), MetricAllowList::default());
        let stats = bridge.drain(&bus, &store, |_, _, _| {}).unwrap();
        assert_eq!(stats, BridgeStats { records: 1, appended: 6 });
        assert_eq!(store.point_count(), 6);
        for k in store.keys() {
            let pts = store.query(&k, 0, u64::MAX).unwrap();
            assert_eq!(pts.len(), 1);
            assert_eq!(pts[0].ts_ms, 1_523_138_724_218);
        }
        assert_eq!(
            store.query(&key(), 0, u64::MAX).unwrap()[0].value,
            18_102_066.0
        );
        assert_eq!(bridge.offset("collectd"), 1);
    }

    #[test]
    fn empty_topic_appends_nothing() {
        let bus = IngestBus::new();
        bus.ensure_topic("collectd").unwrap();
        let store = TimeSeriesStore::new();
        let mut bridge = IngestBridge::new(crate::pipeline::default_topics(), MetricAllowList::default());
        assert_eq!(bridge.drain(&bus, &store, |_, _, _| {}).unwrap(), BridgeStats::default());
    }

    fn publish_many(bus: &IngestBus, n: u64) {
        let mut rec = reference_record();
        for i in 0..n {
            rec.timestamp = 1_523_138_724_218 + i * 1000;
            rec.iso_timestamp = crate::pipeline::iso_millis(rec.timestamp).unwrap();
            bus.publish("collectd", rec.clone()).unwrap();
        }
    }

    #[test]
    fn restarted_bridge_collapses_duplicates() {
        let bus = IngestBus::new();
        publish_many(&bus, 600);
        let store = TimeSeriesStore::new();
        let mut first = IngestBridge::with_batch_size(vec!["collectd".into()], MetricAllowList::default(), 100);
        first.drain(&bus, &store, |_, _, _| {}).unwrap();
        let before = store.point_count();
        publish_many(&bus, 0);
        // a fresh bridge replays from offset zero
        let mut second = IngestBridge::new(vec!["collectd".into()], MetricAllowList::default());
        let mut inserted = 0;
        second
            .drain(&bus, &store, |_, _, o| {
                if o == AppendOutcome::Inserted {
                    inserted += 1
                }
            })
            .unwrap();
        assert_eq!(inserted, 0);
        assert_eq!(store.point_count(), before);
        assert_eq!(before, 600 * 6);
    }

    struct Flaky {
        inner: TimeSeriesStore,
        fail_after: AtomicUsize,
    }

    impl PointSink for Flaky {
        fn append(&self, key: &SeriesKey, point: DataPoint) -> Result<AppendOutcome, StoreError> {
            if self.fail_after.load(Ordering::SeqCst) == 0 {
                return Err(StoreError::Unavailable("disk full".into()));
            }
            self.fail_after.fetch_sub(1, Ordering::SeqCst);
            self.inner.append(key, point)
        }
    }

    #[test]
    fn store_failure_pauses_without_advancing() {
        let bus = IngestBus::new();
        publish_many(&bus, 10);
        let flaky = Flaky {
            inner: TimeSeriesStore::new(),
            fail_after: AtomicUsize::new(6 * 3 + 2),
        };
        let mut bridge = IngestBridge::with_batch_size(vec!["collectd".into()], MetricAllowList::default(), 4);
        let err = bridge.drain(&bus, &flaky, |_, _, _| {}).unwrap_err();
        assert!(matches!(err, BridgeError::Store { offset: 3, .. }));
        assert_eq!(bridge.offset("collectd"), 0);
        flaky.fail_after.store(usize::MAX, Ordering::SeqCst);
        bridge.drain(&bus, &flaky, |_, _, _| {}).unwrap();
        assert_eq!(bridge.offset("collectd"), 10);
        assert_eq!(flaky.inner.point_count(), 60);
    }

    #[test]
    fn background_bridge_drains_concurrent_publishes() {
        let bus = Arc::new(IngestBus::new());
        let store = Arc::new(TimeSeriesStore::new());
        let bridge = IngestBridge::new(vec!["collectd".into()], MetricAllowList::default());
        let task = spawn_ingest_bridge(bridge, bus.clone(), store.clone(), Duration::from_millis(1));
        publish_many(&bus, 300);
        let sample = RawSample {
            src: Source::Collectd,
            host_ip: Ipv4Addr::new(10, 0, 0, 99),
            interface: "x".into(),
            counters: CounterSet::default(),
            timestamp_ms: 5,
        };
        ingest(&bus, &sample, &MetricAllowList::default()).unwrap();
        let (bridge, err) = task.stop();
        assert!(err.is_none());
        assert_eq!(bridge.offset("collectd"), 301);
        assert_eq!(store.point_count(), 301 * 6);
    }

    proptest! {
        #[test]
        fn half_open_union_law(ts in proptest::collection::btree_set(0u64..1000, 0..50), a in 0u64..1000, b in 0u64..1000, c in 0u64..1000) {
            let mut cuts = [a, b, c];
            cuts.sort_unstable();
            let [t0, t1, t2] = cuts;
            let s = TimeSeriesStore::new();
            for t in &ts {
                s.append(&key(), DataPoint::new(*t, *t as f64)).unwrap();
            }
            let mut left = s.query(&key(), t0, t1).unwrap();
            left.extend(s.query(&key(), t1, t2).unwrap());
            prop_assert_eq!(left, s.query(&key(), t0, t2).unwrap());
        }

        #[test]
        fn aggregation_conserves_counts(ts in proptest::collection::vec(0u64..100_000_000, 0..200), bucket in 1u64..10_000_000) {
            let pts: Vec<_> = ts.iter().map(|&t| DataPoint::new(t, 1.0)).collect();
            let out = aggregate(&pts, bucket, AggFn::Sum).unwrap();
            prop_assert_eq!(out.iter().map(|p| p.value).sum::<f64>() as usize, pts.len());
            prop_assert!(out.windows(2).all(|w| w[0].ts_ms < w[1].ts_ms));
        }
    }
}
