//! Utilization derivation, per-hour-of-day benchmarks, sample evaluation and
//! the trend state machine.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::Source;
use crate::config::Violation;
use crate::netsim::{hour_of_day, MS_PER_DAY, MS_PER_HOUR};
use crate::pipeline::Metric;
use crate::tsdb::{SeriesKey, StoreError, TimeSeriesStore};

pub const MAX_UTILIZATION: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("sample interval must be positive")]
    ZeroInterval,
    #[error("link capacity must be positive")]
    ZeroCapacity,
    #[error("insufficient data for hours {hours:?}")]
    InsufficientData { hours: Vec<u8> },
    #[error("sample at {now_ms} is not after the previous sample at {last_ms}")]
    OutOfOrderSample { now_ms: u64, last_ms: u64 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Octets counted between two readings of a 32-bit counter that may have
/// wrapped once.
pub fn counter_delta(prev: u32, curr: u32) -> u64 {
    u64::from(curr.wrapping_sub(prev))
}

pub fn compute_utilization(delta_octets: u64, dt_ms: u64, capacity_bps: u64) -> Result<f64, AnalyticsError> {
    if dt_ms == 0 {
        return Err(AnalyticsError::ZeroInterval);
    }
    if capacity_bps == 0 {
        return Err(AnalyticsError::ZeroCapacity);
    }
    let u = delta_octets as f64 * 8.0 * 1000.0 / (dt_ms as f64 * capacity_bps as f64);
    Ok(u.clamp(0.0, MAX_UTILIZATION))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsConfig {
    pub threshold_fraction: f64,
    pub deviation_multiplier: f64,
    pub confirm_window: u32,
    pub sample_period_ms: u64,
    pub benchmark_days: u32,
    pub benchmark_reset_period_ms: u64,
    pub sigma_floor: f64,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        AnalyticsConfig {
            threshold_fraction: 0.7,
            deviation_multiplier: 2.0,
            confirm_window: 3,
            sample_period_ms: MS_PER_HOUR,
            benchmark_days: 3,
            benchmark_reset_period_ms: 7 * MS_PER_DAY,
            sigma_floor: 0.01,
        }
    }
}

impl AnalyticsConfig {
    /// Every violated constraint, keyed by `prefix.field`.
    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut bad = |field: &str, msg: &str| v.push(Violation::new(format!("{prefix}{field}"), msg));
        let t = self.threshold_fraction;
        if !(t > 0.0 && t <= 1.0) {
            bad("threshold_fraction", "must be in (0, 1]");
        }
        if !(self.deviation_multiplier > 0.0 && self.deviation_multiplier.is_finite()) {
            bad("deviation_multiplier", "must be positive");
        }
        if self.confirm_window == 0 {
            bad("confirm_window", "must be a positive integer");
        }
        if self.sample_period_ms == 0 {
            bad("sample_period_ms", "must be positive");
        }
        if self.benchmark_days == 0 {
            bad("benchmark_days", "must be a positive integer");
        }
        if self.benchmark_reset_period_ms == 0 {
            bad("benchmark_reset_period_ms", "must be positive");
        }
        if !(self.sigma_floor >= 0.0 && self.sigma_floor.is_finite()) {
            bad("sigma_floor", "must be non-negative");
        }
        v
    }
}

/// A link as addressed by its telemetry: the polled device and interface.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId {
    pub host_ip: Ipv4Addr,
    pub interface: String,
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.host_ip, self.interface)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitoredLink {
    pub device: String,
    pub interface: String,
    pub host_ip: Ipv4Addr,
    pub src: Source,
    pub capacity_bps: u64,
}

impl MonitoredLink {
    pub fn id(&self) -> LinkId {
        LinkId {
            host_ip: self.host_ip,
            interface: self.interface.clone(),
        }
    }

    pub fn out_octets_key(&self) -> SeriesKey {
        SeriesKey::new(Metric::OutOctets, self.host_ip, &self.interface, self.src)
    }
}

/// Utilization over the interval `[start_ms, end_ms)` between two counter
/// readings. The hour-of-day is that of the interval start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilSample {
    pub start_ms: u64,
    pub end_ms: u64,
    pub hour: u8,
    pub util: f64,
}

/// Utilization samples whose interval starts in `[t0, t1)`, from the stored
/// outOctets counters. Stored values are 32-bit counter readings.
pub fn utilization_samples(
    store: &TimeSeriesStore,
    link: &MonitoredLink,
    t0: u64,
    t1: u64,
) -> Result<Vec<UtilSample>, AnalyticsError> {
    // one reading past t1 closes the last interval
    let mut pts = store.query(&link.out_octets_key(), t0, t1)?;
    if let Some(next) = store.query(&link.out_octets_key(), t1, u64::MAX)?.first() {
        pts.push(*next);
    }
    pts.windows(2)
        .map(|w| {
            let delta = counter_delta(w[0].value as u32, w[1].value as u32);
            Ok(UtilSample {
                start_ms: w[0].ts_ms,
                end_ms: w[1].ts_ms,
                hour: hour_of_day(w[0].ts_ms),
                util: compute_utilization(delta, w[1].ts_ms - w[0].ts_ms, link.capacity_bps)?,
            })
        })
        .collect()
}

/// The most recent completed sample ending at or before `now_ms`.
pub fn latest_sample(
    store: &TimeSeriesStore,
    link: &MonitoredLink,
    now_ms: u64,
) -> Result<Option<UtilSample>, AnalyticsError> {
    let pts = store.last_before(&link.out_octets_key(), now_ms.saturating_add(1), 2);
    let [a, b] = pts[..] else { return Ok(None) };
    let delta = counter_delta(a.value as u32, b.value as u32);
    Ok(Some(UtilSample {
        start_ms: a.ts_ms,
        end_ms: b.ts_ms,
        hour: hour_of_day(a.ts_ms),
        util: compute_utilization(delta, b.ts_ms - a.ts_ms, link.capacity_bps)?,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourStat {
    pub h: u8,
    pub mean: f64,
    pub sigma: f64,
    pub n: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub id: String,
    pub link: LinkId,
    #[serde(rename = "created_at")]
    pub created_at_ms: u64,
    pub capacity_bps: u64,
    pub threshold: f64,
    pub window_start_ms: u64,
    pub window_end_ms: u64,
    pub hours: Vec<HourStat>,
}

impl Benchmark {
    pub fn hour(&self, h: u8) -> &HourStat {
        &self.hours[usize::from(h)]
    }

    pub fn sample_count(&self) -> u32 {
        self.hours.iter().map(|h| h.n).sum()
    }
}

/// Arithmetic mean and population standard deviation.
pub fn mean_sigma(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Builds the hour-of-day profile from the `benchmark_days` days before
/// `window_end_ms` (floored to a whole hour). Every hour needs at least one
/// sample per day.
pub fn build_benchmark(
    store: &TimeSeriesStore,
    link: &MonitoredLink,
    cfg: &AnalyticsConfig,
    window_end_ms: u64,
) -> Result<Benchmark, AnalyticsError> {
    let end = window_end_ms / MS_PER_HOUR * MS_PER_HOUR;
    let start = end.saturating_sub(u64::from(cfg.benchmark_days) * MS_PER_DAY);
    let samples: Vec<UtilSample> = utilization_samples(store, link, start, end)?
        .into_iter()
        .filter(|s| s.end_ms <= end)
        .collect();
    let mut by_hour: Vec<Vec<f64>> = vec![Vec::new(); 24];
    for s in &samples {
        by_hour[usize::from(s.hour)].push(s.util);
    }
    let short: Vec<u8> = (0..24u8)
        .filter(|h| by_hour[usize::from(*h)].len() < cfg.benchmark_days as usize)
        .collect();
    if !short.is_empty() {
        return Err(AnalyticsError::InsufficientData { hours: short });
    }
    let hours = by_hour
        .iter()
        .enumerate()
        .map(|(h, xs)| {
            let (mean, sigma) = mean_sigma(xs);
            HourStat {
                h: h as u8,
                mean,
                sigma,
                n: xs.len() as u32,
            }
        })
        .collect();
    Ok(Benchmark {
        id: format!("bm-{}-{}-{}", link.host_ip, link.interface, window_end_ms),
        link: link.id(),
        created_at_ms: window_end_ms,
        capacity_bps: link.capacity_bps,
        threshold: cfg.threshold_fraction,
        window_start_ms: start,
        window_end_ms: end,
        hours,
    })
}

/// Above the benchmark's threshold and more than `k` deviations from the
/// hour's mean.
pub fn evaluate_sample(bm: &Benchmark, cfg: &AnalyticsConfig, hour: u8, util: f64) -> bool {
    let stat = bm.hour(hour);
    util > bm.threshold
        && (util - stat.mean).abs() > cfg.deviation_multiplier * stat.sigma.max(cfg.sigma_floor)
}

pub fn should_reset(bm: &Benchmark, now_ms: u64, cfg: &AnalyticsConfig) -> bool {
    now_ms.saturating_sub(bm.created_at_ms) >= cfg.benchmark_reset_period_ms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendEvent {
    pub id: String,
    pub link: LinkId,
    pub started_at_ms: u64,
    pub confirmed_at_ms: u64,
    pub ended_at_ms: Option<u64>,
    pub peak_utilization: f64,
    pub benchmark_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transition", content = "event", rename_all = "lowercase")]
pub enum TrendTransition {
    Confirmed(TrendEvent),
    Ended(TrendEvent),
}

impl TrendTransition {
    pub fn event(&self) -> &TrendEvent {
        match self {
            TrendTransition::Confirmed(e) | TrendTransition::Ended(e) => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendState {
    pub link: LinkId,
    pub consecutive_flags: u32,
    pub active: bool,
    pub current_event: Option<TrendEvent>,
    started_at_ms: Option<u64>,
    peak: f64,
    last_ms: Option<u64>,
}

impl TrendState {
    pub fn new(link: LinkId) -> Self {
        TrendState {
            link,
            consecutive_flags: 0,
            active: false,
            current_event: None,
            started_at_ms: None,
            peak: 0.0,
            last_ms: None,
        }
    }

    /// Feeds one evaluated sample. `new_id` is called only when a trend is
    /// confirmed.
    pub fn advance(
        &mut self,
        flagged: bool,
        now_ms: u64,
        util: f64,
        window: u32,
        benchmark_id: &str,
        new_id: impl FnOnce() -> String,
    ) -> Result<Option<TrendTransition>, AnalyticsError> {
        if let Some(last) = self.last_ms {
            if now_ms <= last {
                return Err(AnalyticsError::OutOfOrderSample { now_ms, last_ms: last });
            }
        }
        self.last_ms = Some(now_ms);
        if self.active {
            let ev = self.current_event.as_mut().expect("active trend has an event");
            if flagged {
                ev.peak_utilization = ev.peak_utilization.max(util);
                return Ok(None);
            }
            ev.ended_at_ms = Some(now_ms);
            let ended = self.current_event.take().expect("active trend has an event");
            self.active = false;
            self.consecutive_flags = 0;
            self.started_at_ms = None;
            return Ok(Some(TrendTransition::Ended(ended)));
        }
        if !flagged {
            self.consecutive_flags = 0;
            self.started_at_ms = None;
            self.peak = 0.0;
            return Ok(None);
        }
        if self.consecutive_flags == 0 {
            self.started_at_ms = Some(now_ms);
            self.peak = util;
        } else {
            self.peak = self.peak.max(util);
        }
        self.consecutive_flags += 1;
        if self.consecutive_flags < window {
            return Ok(None);
        }
        let ev = TrendEvent {
            id: new_id(),
            link: self.link.clone(),
            started_at_ms: self.started_at_ms.expect("started with first flag"),
            confirmed_at_ms: now_ms,
            ended_at_ms: None,
            peak_utilization: self.peak,
            benchmark_id: benchmark_id.to_string(),
        };
        self.active = true;
        self.current_event = Some(ev.clone());
        Ok(Some(TrendTransition::Confirmed(ev)))
    }
}
