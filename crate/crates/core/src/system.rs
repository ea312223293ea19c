//! The whole loop on one virtual clock: step the network, poll, publish,
//! store, evaluate trends, act and revert. Every state change goes through a
//! [`Command`], so replaying the same commands from the same config rebuilds
//! the same state.

use std::collections::BTreeMap;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actioner::{ActionError, Actioner, ActionerConfig, LoadBalanceDecision, PeriodLoads};
use crate::analytics::{
    build_benchmark, evaluate_sample, latest_sample, should_reset, AnalyticsConfig, AnalyticsError,
    Benchmark, LinkId, MonitoredLink, TrendEvent, TrendState, TrendTransition, UtilSample,
};
use crate::collector::{poll_round, Poller, RawSample, Source};
use crate::config::{ConfigError, SystemConfig};
use crate::netsim::{build_topology, Endpoint, Hop, Injection, SimError, SimNetwork, VirtualClock};
use crate::pipeline::{ingest, IngestBus, PipelineError};
use crate::tsdb::{AppendOutcome, BridgeError, DataPoint, IngestBridge, SeriesKey, TimeSeriesStore};

/// Seed offset separating poll jitter from traffic noise.
const POLL_SEED_SALT: u64 = 0x706f_6c6c;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("benchmark for {link}: {source}")]
    Benchmark { link: LinkId, source: AnalyticsError },
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error("{0}")]
    Invalid(String),
}

/// A state-changing request. The persisted log of these is the source of
/// truth for a data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Advance {
        ms: u64,
    },
    Inject {
        src_prefix: Ipv4Net,
        dst_prefix: Ipv4Net,
        factor: f64,
        duration_ms: u64,
    },
    BuildBenchmarks {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        days: Option<u32>,
    },
    Approve {
        id: String,
    },
    Revert {
        id: String,
    },
    Configure {
        analytics: AnalyticsConfig,
        actioner: ActionerConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvent {
    pub link: LinkId,
    pub device: String,
    #[serde(flatten)]
    pub sample: UtilSample,
    /// Absent until the link has a benchmark.
    pub flagged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "lowercase")]
pub enum EventBody {
    Sample(SampleEvent),
    Benchmark(Benchmark),
    Trend(TrendTransition),
    Decision(LoadBalanceDecision),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemEvent {
    pub ts_ms: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Everything a command produced, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outputs {
    /// Points newly written or changed in the store.
    pub points: Vec<(SeriesKey, DataPoint)>,
    pub events: Vec<SystemEvent>,
}

impl Outputs {
    fn event(&mut self, ts_ms: u64, body: EventBody) {
        self.events.push(SystemEvent { ts_ms, body });
    }

    pub fn extend(&mut self, other: Outputs) {
        self.points.extend(other.points);
        self.events.extend(other.events);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub hour: u8,
    pub mean_util: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub link: LinkId,
    pub device: String,
    pub benchmark_id: String,
    pub samples: u32,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub days: u32,
    pub period_ms: u64,
    pub seed: u64,
    pub generated_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub scenario: ScenarioMeta,
    pub links: Vec<LinkReport>,
}

impl ReportDocument {
    /// `link,hour,mean,sigma` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("link,hour,mean,sigma\n");
        for l in &self.links {
            for r in &l.rows {
                out.push_str(&format!("{},{},{},{}\n", l.link, r.hour, r.mean_util, r.sigma));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandPath {
    pub src_prefix: Ipv4Net,
    pub dst_prefix: Ipv4Net,
    pub path: Option<Vec<Hop>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyView {
    pub now_ms: u64,
    pub spec: crate::netsim::TopologySpec,
    pub monitored_links: Vec<MonitoredLink>,
    pub paths: Vec<DemandPath>,
    pub injections: Vec<Injection>,
}

#[derive(Debug)]
pub struct TrendSystem {
    cfg: SystemConfig,
    net: SimNetwork,
    bus: IngestBus,
    store: TimeSeriesStore,
    bridge: IngestBridge,
    poller: Poller,
    baseline_polled: bool,
    links: Vec<MonitoredLink>,
    benchmarks: BTreeMap<LinkId, Benchmark>,
    states: BTreeMap<LinkId, TrendState>,
    trends: Vec<TrendEvent>,
    actioner: Actioner,
    loads: PeriodLoads,
    trend_seq: u64,
    polls: u64,
}

impl TrendSystem {
    pub fn new(cfg: SystemConfig) -> Result<Self, SystemError> {
        let cfg = cfg.validated()?;
        let clock = VirtualClock::new(cfg.sim.epoch_ms, cfg.sim.acceleration);
        let net = build_topology(cfg.topology.clone(), cfg.traffic.clone(), clock)?;
        let bus = IngestBus::new();
        for t in &cfg.pipeline.topics {
            bus.ensure_topic(t).map_err(PipelineError::from)?;
        }
        let poller = Poller::new(cfg.poll, cfg.sim.epoch_ms, cfg.traffic.rng_seed ^ POLL_SEED_SALT)
            .map_err(|e| SystemError::Invalid(e.to_string()))?;
        let links = monitored_links(&net, cfg.monitored_links.as_deref());
        let states = links.iter().map(|l| (l.id(), TrendState::new(l.id()))).collect();
        Ok(TrendSystem {
            bridge: IngestBridge::new(cfg.pipeline.topics.clone(), cfg.pipeline.allow_list.clone()),
            actioner: Actioner::new(cfg.actioner.clone()),
            cfg,
            net,
            bus,
            store: TimeSeriesStore::new(),
            poller,
            baseline_polled: false,
            links,
            benchmarks: BTreeMap::new(),
            states,
            trends: Vec::new(),
            loads: PeriodLoads::default(),
            trend_seq: 0,
            polls: 0,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn now_ms(&self) -> u64 {
        self.net.now_ms()
    }

    pub fn net(&self) -> &SimNetwork {
        &self.net
    }

    pub fn store(&self) -> &TimeSeriesStore {
        &self.store
    }

    pub fn bus(&self) -> &IngestBus {
        &self.bus
    }

    pub fn links(&self) -> &[MonitoredLink] {
        &self.links
    }

    pub fn link(&self, host_ip: std::net::Ipv4Addr, interface: &str) -> Option<&MonitoredLink> {
        self.links
            .iter()
            .find(|l| l.host_ip == host_ip && l.interface == interface)
    }

    pub fn poll_rounds(&self) -> u64 {
        self.polls
    }

    pub fn benchmarks(&self) -> impl Iterator<Item = &Benchmark> {
        self.benchmarks.values()
    }

    pub fn benchmark(&self, link: &LinkId) -> Option<&Benchmark> {
        self.benchmarks.get(link)
    }

    pub fn trends(&self) -> &[TrendEvent] {
        &self.trends
    }

    pub fn trend_state(&self, link: &LinkId) -> Option<&TrendState> {
        self.states.get(link)
    }

    pub fn decisions(&self) -> &[LoadBalanceDecision] {
        self.actioner.decisions()
    }

    pub fn decision(&self, id: &str) -> Option<&LoadBalanceDecision> {
        self.actioner.decision(id)
    }

    pub fn topology_view(&self) -> TopologyView {
        TopologyView {
            now_ms: self.now_ms(),
            spec: self.cfg.topology.clone(),
            monitored_links: self.links.clone(),
            paths: self
                .net
                .profile()
                .demands
                .iter()
                .map(|d| DemandPath {
                    src_prefix: d.src_prefix,
                    dst_prefix: d.dst_prefix,
                    path: self.net.resolve_path(d.src_prefix, d.dst_prefix).ok(),
                })
                .collect(),
            injections: self.net.injections().to_vec(),
        }
    }

    pub fn apply(&mut self, cmd: &Command) -> Result<Outputs, SystemError> {
        let mut out = Outputs::default();
        let now = self.now_ms();
        match cmd {
            Command::Advance { ms } => self.advance(*ms, &mut out)?,
            Command::Inject {
                src_prefix,
                dst_prefix,
                factor,
                duration_ms,
            } => {
                self.net.inject(*src_prefix, *dst_prefix, *factor, *duration_ms)?;
            }
            Command::BuildBenchmarks { days } => {
                for bm in self.build_benchmarks(*days)? {
                    out.event(now, EventBody::Benchmark(bm.clone()));
                    self.benchmarks.insert(bm.link.clone(), bm);
                }
            }
            Command::Approve { id } => {
                let d = self.actioner.approve(id, &mut self.net, now)?;
                out.event(now, EventBody::Decision(d));
            }
            Command::Revert { id } => {
                let d = self.actioner.revert(id, &mut self.net, now)?;
                out.event(now, EventBody::Decision(d));
            }
            Command::Configure { analytics, actioner } => {
                let mut cfg = self.cfg.clone();
                cfg.analytics = analytics.clone();
                cfg.actioner = actioner.clone();
                self.cfg = cfg.validated()?;
                self.actioner.cfg = actioner.clone();
            }
        }
        Ok(out)
    }

    /// Benchmarks for every monitored link at the current instant, or the
    /// first link's failure. Nothing is stored.
    pub fn build_benchmarks(&self, days: Option<u32>) -> Result<Vec<Benchmark>, SystemError> {
        let mut acfg = self.cfg.analytics.clone();
        if let Some(d) = days {
            if d == 0 {
                return Err(SystemError::Invalid("days must be positive".into()));
            }
            acfg.benchmark_days = d;
        }
        self.links
            .iter()
            .map(|l| {
                build_benchmark(&self.store, l, &acfg, self.now_ms()).map_err(|source| SystemError::Benchmark {
                    link: l.id(),
                    source,
                })
            })
            .collect()
    }

    fn advance(&mut self, ms: u64, out: &mut Outputs) -> Result<(), SystemError> {
        let target = self.now_ms() + ms;
        let tick = self.cfg.tick_ms();
        loop {
            self.on_instant(out)?;
            let now = self.now_ms();
            if now >= target {
                return Ok(());
            }
            let mut dt = tick.min(target - now);
            for due in [Some(self.poller.next_due_ms()), self.actioner.scheduler().next_due_ms()]
                .into_iter()
                .flatten()
            {
                if due > now {
                    dt = dt.min(due - now);
                }
            }
            let report = self.net.step(dt)?;
            self.loads.add(&report);
        }
    }

    /// Work due at the current instant: reverts first, then a poll and its
    /// evaluation, then benchmark refresh.
    fn on_instant(&mut self, out: &mut Outputs) -> Result<(), SystemError> {
        let now = self.now_ms();
        for d in self.actioner.process_due(&mut self.net, now) {
            out.event(now, EventBody::Decision(d));
        }
        let round = if self.baseline_polled {
            self.poller.poll_if_due(&self.net)
        } else {
            self.baseline_polled = true;
            Some(poll_round(&self.net))
        };
        if let Some(round) = round {
            self.polls += 1;
            self.ingest_round(&round, out)?;
            self.evaluate(now, out)?;
            self.loads = PeriodLoads::default();
        }
        self.refresh_benchmarks(now, out);
        Ok(())
    }

    fn ingest_round(&mut self, round: &[RawSample], out: &mut Outputs) -> Result<(), SystemError> {
        for s in round {
            ingest(&self.bus, s, &self.cfg.pipeline.allow_list)?;
        }
        let points = &mut out.points;
        self.bridge.drain(&self.bus, &self.store, |k, p, o| {
            if o != AppendOutcome::Unchanged {
                points.push((k.clone(), *p));
            }
        })?;
        Ok(())
    }

    fn evaluate(&mut self, now: u64, out: &mut Outputs) -> Result<(), SystemError> {
        let window = self.cfg.analytics.confirm_window;
        for link in self.links.clone() {
            let Some(sample) = latest_sample(&self.store, &link, now)? else {
                continue;
            };
            if sample.end_ms != now {
                continue;
            }
            let id = link.id();
            let bm = self.benchmarks.get(&id);
            let flagged = bm.map(|bm| evaluate_sample(bm, &self.cfg.analytics, sample.hour, sample.util));
            out.event(
                now,
                EventBody::Sample(SampleEvent {
                    link: id.clone(),
                    device: link.device.clone(),
                    sample,
                    flagged,
                }),
            );
            let (Some(flag), Some(bm)) = (flagged, bm) else { continue };
            let bm_id = bm.id.clone();
            let seq = &mut self.trend_seq;
            let state = self.states.get_mut(&id).expect("state per link");
            let Some(tr) = state.advance(flag, now, sample.util, window, &bm_id, || {
                *seq += 1;
                format!("t-{seq}")
            })?
            else {
                continue;
            };
            match &tr {
                TrendTransition::Confirmed(e) => self.trends.push(e.clone()),
                TrendTransition::Ended(e) => {
                    if let Some(t) = self.trends.iter_mut().find(|t| t.id == e.id) {
                        *t = e.clone();
                    }
                }
            }
            out.event(now, EventBody::Trend(tr.clone()));
            let congested = Hop::new(&link.device, &link.interface);
            let period = self.cfg.analytics.sample_period_ms;
            for d in self
                .actioner
                .on_trend(&tr, &congested, &mut self.net, &self.loads, period, now)
            {
                out.event(now, EventBody::Decision(d));
            }
        }
        Ok(())
    }

    fn refresh_benchmarks(&mut self, now: u64, out: &mut Outputs) {
        let stale: Vec<MonitoredLink> = self
            .links
            .iter()
            .filter(|l| {
                self.benchmarks
                    .get(&l.id())
                    .is_some_and(|bm| should_reset(bm, now, &self.cfg.analytics))
            })
            .cloned()
            .collect();
        for l in stale {
            // keep the old profile when the recent window is incomplete
            if let Ok(bm) = build_benchmark(&self.store, &l, &self.cfg.analytics, now) {
                out.event(now, EventBody::Benchmark(bm.clone()));
                self.benchmarks.insert(l.id(), bm);
            }
        }
    }

    /// Per-link hour-of-day rows from the current benchmarks.
    pub fn report(&self) -> Option<ReportDocument> {
        let links: Vec<LinkReport> = self
            .links
            .iter()
            .filter_map(|l| {
                let bm = self.benchmarks.get(&l.id())?;
                Some(LinkReport {
                    link: l.id(),
                    device: l.device.clone(),
                    benchmark_id: bm.id.clone(),
                    samples: bm.sample_count(),
                    rows: bm
                        .hours
                        .iter()
                        .map(|h| ReportRow {
                            hour: h.h,
                            mean_util: h.mean,
                            sigma: h.sigma,
                        })
                        .collect(),
                })
            })
            .collect();
        let first = self.benchmarks.values().next()?;
        Some(ReportDocument {
            scenario: ScenarioMeta {
                days: ((first.window_end_ms - first.window_start_ms) / crate::netsim::MS_PER_DAY) as u32,
                period_ms: self.cfg.poll.period_ms,
                seed: self.cfg.traffic.rng_seed,
                generated_at_ms: first.created_at_ms,
            },
            links,
        })
    }
}

/// Explicit links, or every inter-device egress on a demand's current path,
/// in path order.
pub fn monitored_links(net: &SimNetwork, explicit: Option<&[Endpoint]>) -> Vec<MonitoredLink> {
    let endpoints: Vec<Endpoint> = match explicit {
        Some(eps) => eps.to_vec(),
        None => {
            let mut seen = Vec::new();
            for d in &net.profile().demands {
                for hop in net.resolve_path(d.src_prefix, d.dst_prefix).unwrap_or_default() {
                    let ep = Endpoint::new(&hop.device, &hop.egress);
                    let inter = net
                        .interface(&hop.device, &hop.egress)
                        .is_some_and(|i| i.peer.is_some());
                    if inter && !seen.contains(&ep) {
                        seen.push(ep);
                    }
                }
            }
            seen
        }
    };
    endpoints
        .into_iter()
        .filter_map(|ep| {
            let dev = net.topology().device(&ep.device)?;
            let iface = net.interface(&ep.device, &ep.interface)?;
            Some(MonitoredLink {
                device: ep.device.clone(),
                interface: ep.interface.clone(),
                host_ip: dev.mgmt_ip,
                src: Source::for_kind(dev.kind),
                capacity_bps: iface.capacity_bps,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actioner::DecisionStatus;
    use crate::netsim::MS_PER_HOUR;

    fn quiet() -> SystemConfig {
        let mut c = SystemConfig::default();
        c.traffic = c.traffic.without_noise();
        c
    }

    #[test]
    fn default_links_follow_baseline_paths() {
        let s = TrendSystem::new(SystemConfig::default()).unwrap();
        let names: Vec<String> = s.links().iter().map(|l| format!("{}/{}", l.device, l.interface)).collect();
        assert_eq!(
            names,
            ["R1/FastEthernet0_0", "R2/FastEthernet0_1", "S1/eth1", "S2/eth2"]
        );
        assert_eq!(s.links()[2].src, Source::Sdn);
    }

    #[test]
    fn seventy_two_hours_give_seventy_three_polls() {
        let mut s = TrendSystem::new(SystemConfig::default()).unwrap();
        let out = s.apply(&Command::Advance { ms: 72 * MS_PER_HOUR }).unwrap();
        assert_eq!(s.poll_rounds(), 73);
        let samples = out
            .events
            .iter()
            .filter(|e| matches!(e.body, EventBody::Sample(_)))
            .count();
        assert_eq!(samples, 72 * 4);
        let out = s.apply(&Command::BuildBenchmarks { days: Some(3) }).unwrap();
        assert_eq!(out.events.len(), 4);
        assert!(s.benchmarks().all(|b| b.sample_count() == 72 && b.hours.len() == 24));
        let report = s.report().unwrap();
        assert_eq!(report.links.len(), 4);
        assert_eq!(report.scenario.days, 3);
        assert!(report.links.iter().all(|l| l.rows.len() == 24));
        assert_eq!(report.to_csv().lines().count(), 1 + 4 * 24);
    }

    #[test]
    fn benchmark_on_empty_store_names_hours() {
        let s = TrendSystem::new(SystemConfig::default()).unwrap();
        let err = s.build_benchmarks(Some(3)).unwrap_err();
        assert!(matches!(
            err,
            SystemError::Benchmark { source: AnalyticsError::InsufficientData { ref hours }, .. } if hours.len() == 24
        ));
    }

    #[test]
    fn replay_is_deterministic() {
        let cmds = [
            Command::Advance { ms: 72 * MS_PER_HOUR },
            Command::BuildBenchmarks { days: None },
            Command::Advance { ms: 9 * MS_PER_HOUR },
            Command::Inject {
                src_prefix: "10.0.1.0/24".parse().unwrap(),
                dst_prefix: "10.0.3.0/24".parse().unwrap(),
                factor: 3.0,
                duration_ms: 6 * MS_PER_HOUR,
            },
            Command::Advance { ms: 12 * MS_PER_HOUR },
        ];
        let run = || {
            let mut s = TrendSystem::new(SystemConfig::default()).unwrap();
            let events: Vec<SystemEvent> = cmds.iter().flat_map(|c| s.apply(c).unwrap().events).collect();
            (events, s.decisions().to_vec(), s.report())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn spike_confirms_acts_and_reverts() {
        let mut s = TrendSystem::new(quiet()).unwrap();
        s.apply(&Command::Advance { ms: 72 * MS_PER_HOUR }).unwrap();
        s.apply(&Command::BuildBenchmarks { days: None }).unwrap();
        s.apply(&Command::Advance { ms: 9 * MS_PER_HOUR }).unwrap();
        let before = s.net().routing_snapshot();
        s.apply(&Command::Inject {
            src_prefix: "10.0.1.0/24".parse().unwrap(),
            dst_prefix: "10.0.3.0/24".parse().unwrap(),
            factor: 3.0,
            duration_ms: 5 * MS_PER_HOUR,
        })
        .unwrap();
        let out = s.apply(&Command::Advance { ms: 3 * MS_PER_HOUR }).unwrap();
        let confirmed: Vec<_> = out
            .events
            .iter()
            .filter(|e| matches!(e.body, EventBody::Trend(TrendTransition::Confirmed(_))))
            .collect();
        assert!(!confirmed.is_empty());
        assert_eq!(s.decisions().len(), 1);
        let d = &s.decisions()[0];
        assert_eq!(d.status, DecisionStatus::Applied);
        assert_eq!(d.applied_at_ms, Some(s.now_ms()));
        s.apply(&Command::Advance { ms: 6 * MS_PER_HOUR }).unwrap();
        assert_eq!(s.decisions()[0].status, DecisionStatus::Reverted);
        assert_eq!(s.net().routing_snapshot(), before);
    }

    #[test]
    fn commands_round_trip_as_json() {
        let c = Command::BuildBenchmarks { days: Some(3) };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(text, r#"{"op":"build_benchmarks","days":3}"#);
        assert_eq!(serde_json::from_str::<Command>(&text).unwrap(), c);
        assert!(serde_json::from_str::<Command>(r#"{"op":"advance","ms":1,"x":2}"#).is_err());
    }
}
