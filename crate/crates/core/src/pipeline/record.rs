use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::{RawSample, Source};

/// The six interface counter metrics, named as they appear on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "inOctets")]
    InOctets,
    #[serde(rename = "inPkts")]
    InPkts,
    #[serde(rename = "inDiscards")]
    InDiscards,
    #[serde(rename = "outOctets")]
    OutOctets,
    #[serde(rename = "outPkts")]
    OutPkts,
    #[serde(rename = "outDiscards")]
    OutDiscards,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::InOctets,
        Metric::InPkts,
        Metric::InDiscards,
        Metric::OutOctets,
        Metric::OutPkts,
        Metric::OutDiscards,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::InOctets => "inOctets",
            Metric::InPkts => "inPkts",
            Metric::InDiscards => "inDiscards",
            Metric::OutOctets => "outOctets",
            Metric::OutPkts => "outPkts",
            Metric::OutDiscards => "outDiscards",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("metric allow-list must not be empty")]
pub struct EmptyAllowList;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Metric>", into = "Vec<Metric>")]
pub struct MetricAllowList(BTreeSet<Metric>);

impl MetricAllowList {
    pub fn new(names: impl IntoIterator<Item = Metric>) -> Result<Self, EmptyAllowList> {
        let set: BTreeSet<Metric> = names.into_iter().collect();
        if set.is_empty() {
            return Err(EmptyAllowList);
        }
        Ok(MetricAllowList(set))
    }

    pub fn contains(&self, m: Metric) -> bool {
        self.0.contains(&m)
    }

    pub fn iter(&self) -> impl Iterator<Item = Metric> + '_ {
        self.0.iter().copied()
    }

    pub fn is_subset(&self, other: &MetricAllowList) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl Default for MetricAllowList {
    fn default() -> Self {
        MetricAllowList(Metric::ALL.into_iter().collect())
    }
}

impl TryFrom<Vec<Metric>> for MetricAllowList {
    type Error = EmptyAllowList;

    fn try_from(v: Vec<Metric>) -> Result<Self, Self::Error> {
        MetricAllowList::new(v)
    }
}

impl From<MetricAllowList> for Vec<Metric> {
    fn from(a: MetricAllowList) -> Self {
        a.0.into_iter().collect()
    }
}

/// A raw sample reduced to an allow-listed subset of its counters. Identity
/// fields are always kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredSample {
    pub src: Source,
    pub host_ip: Ipv4Addr,
    pub interface: String,
    pub timestamp_ms: u64,
    pub metrics: BTreeMap<Metric, u64>,
}

impl From<&RawSample> for FilteredSample {
    fn from(s: &RawSample) -> Self {
        let c = &s.counters;
        let metrics = [
            (Metric::InOctets, c.in_octets),
            (Metric::InPkts, c.in_pkts),
            (Metric::InDiscards, c.in_discards),
            (Metric::OutOctets, c.out_octets),
            (Metric::OutPkts, c.out_pkts),
            (Metric::OutDiscards, c.out_discards),
        ]
        .into_iter()
        .map(|(m, v)| (m, u64::from(v)))
        .collect();
        FilteredSample {
            src: s.src,
            host_ip: s.host_ip,
            interface: s.interface.clone(),
            timestamp_ms: s.timestamp_ms,
            metrics,
        }
    }
}

pub fn filter_metrics(sample: &FilteredSample, allow: &MetricAllowList) -> FilteredSample {
    FilteredSample {
        metrics: sample
            .metrics
            .iter()
            .filter(|(m, _)| allow.contains(**m))
            .map(|(m, v)| (*m, *v))
            .collect(),
        ..sample.clone()
    }
}

/// Normalized telemetry envelope. Field names and order are a wire contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryRecord {
    #[serde(rename = "@timestamp")]
    pub iso_timestamp: String,
    pub plugin: String,
    pub collectd_type: String,
    pub type_instance: String,
    #[serde(rename = "inOctets")]
    pub in_octets: u64,
    #[serde(rename = "inPkts")]
    pub in_pkts: u64,
    #[serde(rename = "inDiscards")]
    pub in_discards: u64,
    #[serde(rename = "outOctets")]
    pub out_octets: u64,
    #[serde(rename = "outPkts")]
    pub out_pkts: u64,
    #[serde(rename = "outDiscards")]
    pub out_discards: u64,
    #[serde(rename = "@version")]
    pub version: String,
    pub src: Source,
    pub host_ip: Ipv4Addr,
    pub rawdata: String,
    pub timestamp: u64,
}

impl TelemetryRecord {
    pub fn metric(&self, m: Metric) -> u64 {
        match m {
            Metric::InOctets => self.in_octets,
            Metric::InPkts => self.in_pkts,
            Metric::InDiscards => self.in_discards,
            Metric::OutOctets => self.out_octets,
            Metric::OutPkts => self.out_pkts,
            Metric::OutDiscards => self.out_discards,
        }
    }
}

pub const COLLECTD_TYPE: &str = "if_cols";
pub const ENVELOPE_VERSION: &str = "1";

/// Metrics mirrored into `rawdata`, in wire order.
const RAWDATA_METRICS: [Metric; 4] = [
    Metric::InPkts,
    Metric::OutPkts,
    Metric::InOctets,
    Metric::OutOctets,
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed sample: {0}")]
    MalformedSample(String),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
}

pub fn plugin_for(src: Source) -> &'static str {
    match src {
        Source::Collectd => "snmp",
        Source::Sdn => "openflow",
    }
}

/// `2018-04-07T22:05:24.218Z` style UTC rendering of epoch milliseconds.
pub fn iso_millis(ts_ms: u64) -> Option<String> {
    let dt: DateTime<Utc> = DateTime::from_timestamp_millis(i64::try_from(ts_ms).ok()?)?;
    Some(dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string())
}

fn render_rawdata(interface: &str, metrics: &BTreeMap<Metric, u64>) -> String {
    let mut out = String::from("{\"interface\" : ");
    out.push_str(&serde_json::to_string(interface).expect("string serializes"));
    for m in RAWDATA_METRICS {
        if let Some(v) = metrics.get(&m) {
            let _ = write!(out, ", \"{}\" : {}", m.name(), v);
        }
    }
    out.push('}');
    out
}

pub fn encode(sample: &FilteredSample) -> Result<TelemetryRecord, CodecError> {
    if sample.interface.is_empty() {
        return Err(CodecError::MalformedSample("empty interface name".into()));
    }
    let iso = iso_millis(sample.timestamp_ms).ok_or_else(|| {
        CodecError::MalformedSample(format!("timestamp {} out of range", sample.timestamp_ms))
    })?;
    let get = |m| sample.metrics.get(&m).copied().unwrap_or(0);
    Ok(TelemetryRecord {
        iso_timestamp: iso,
        plugin: plugin_for(sample.src).to_string(),
        collectd_type: COLLECTD_TYPE.to_string(),
        type_instance: sample.interface.clone(),
        in_octets: get(Metric::InOctets),
        in_pkts: get(Metric::InPkts),
        in_discards: get(Metric::InDiscards),
        out_octets: get(Metric::OutOctets),
        out_pkts: get(Metric::OutPkts),
        out_discards: get(Metric::OutDiscards),
        version: ENVELOPE_VERSION.to_string(),
        src: sample.src,
        host_ip: sample.host_ip,
        rawdata: render_rawdata(&sample.interface, &sample.metrics),
        timestamp: sample.timestamp_ms,
    })
}

/// Inverse of [`encode`]. Checks the envelope's internal consistency and
/// returns every top-level counter.
pub fn decode(record: &TelemetryRecord) -> Result<FilteredSample, CodecError> {
    let bad = |m: String| CodecError::MalformedRecord(m);
    if iso_millis(record.timestamp).as_deref() != Some(record.iso_timestamp.as_str()) {
        return Err(bad(format!(
            "@timestamp {} does not match timestamp {}",
            record.iso_timestamp, record.timestamp
        )));
    }
    if record.plugin != plugin_for(record.src) {
        return Err(bad(format!("plugin {} does not match src {}", record.plugin, record.src)));
    }
    let raw: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&record.rawdata).map_err(|e| bad(format!("rawdata: {e}")))?;
    if raw.get("interface").and_then(|v| v.as_str()) != Some(record.type_instance.as_str()) {
        return Err(bad("rawdata interface does not match type_instance".into()));
    }
    for m in RAWDATA_METRICS {
        if let Some(v) = raw.get(m.name()) {
            if v.as_u64() != Some(record.metric(m)) {
                return Err(bad(format!("rawdata {m} does not match top-level value")));
            }
        }
    }
    Ok(FilteredSample {
        src: record.src,
        host_ip: record.host_ip,
        interface: record.type_instance.clone(),
        timestamp_ms: record.timestamp,
        metrics: Metric::ALL.into_iter().map(|m| (m, record.metric(m))).collect(),
    })
}
