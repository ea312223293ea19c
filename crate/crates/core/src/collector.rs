//! Periodic polling of the simulator's two telemetry surfaces: SNMP-style
//! device counters (`src = "collectd"`) and controller-style per-port stats
//! (`src = "sdn"`).

use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{CounterSample, CounterSet, DeviceKind, SimError, SimNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Collectd,
    Sdn,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Collectd => "collectd",
            Source::Sdn => "sdn",
        }
    }

    pub fn for_kind(kind: DeviceKind) -> Self {
        match kind {
            DeviceKind::Traditional => Source::Collectd,
            DeviceKind::SdnSwitch => Source::Sdn,
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "collectd" => Ok(Source::Collectd),
            "sdn" => Ok(Source::Sdn),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub src: Source,
    pub host_ip: Ipv4Addr,
    pub interface: String,
    pub counters: CounterSet,
    pub timestamp_ms: u64,
}

impl RawSample {
    fn tagged(src: Source, s: CounterSample) -> Self {
        RawSample {
            src,
            host_ip: s.host_ip,
            interface: s.interface,
            counters: s.counters,
            timestamp_ms: s.timestamp_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PollSchedule {
    pub period_ms: u64,
    pub jitter_ms: u64,
}

impl Default for PollSchedule {
    fn default() -> Self {
        PollSchedule {
            period_ms: crate::netsim::MS_PER_HOUR,
            jitter_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CollectorError {
    #[error("poll period must be positive")]
    ZeroPeriod,
    #[error("tick must be positive")]
    ZeroTick,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    SinkClosed(#[from] SinkClosed),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("sample sink closed")]
pub struct SinkClosed;

pub fn poll_traditional(net: &SimNetwork, device_id: &str) -> Result<Vec<RawSample>, SimError> {
    Ok(net
        .read_counters(device_id)?
        .into_iter()
        .map(|s| RawSample::tagged(Source::Collectd, s))
        .collect())
}

pub fn poll_sdn(net: &SimNetwork) -> Vec<RawSample> {
    net.read_flow_stats()
        .into_iter()
        .map(|s| RawSample::tagged(Source::Sdn, s))
        .collect()
}

/// One full poll round: traditional devices by id, then SDN switches by id,
/// interfaces by name within each device.
pub fn poll_round(net: &SimNetwork) -> Vec<RawSample> {
    let mut out = Vec::new();
    for dev in net.devices().filter(|d| d.kind == DeviceKind::Traditional) {
        out.extend(poll_traditional(net, &dev.id).expect("traditional device"));
    }
    out.extend(poll_sdn(net));
    out
}

/// Receives one poll round at a time.
pub trait SampleSink {
    fn deliver(&mut self, round: Vec<RawSample>) -> Result<(), SinkClosed>;
}

impl SampleSink for Vec<RawSample> {
    fn deliver(&mut self, round: Vec<RawSample>) -> Result<(), SinkClosed> {
        self.extend(round);
        Ok(())
    }
}

impl SampleSink for mpsc::Sender<Vec<RawSample>> {
    fn deliver(&mut self, round: Vec<RawSample>) -> Result<(), SinkClosed> {
        self.send(round).map_err(|_| SinkClosed)
    }
}

/// Bounded channel: a full channel blocks the poller, stalling virtual time.
impl SampleSink for mpsc::SyncSender<Vec<RawSample>> {
    fn deliver(&mut self, round: Vec<RawSample>) -> Result<(), SinkClosed> {
        self.send(round).map_err(|_| SinkClosed)
    }
}

/// Virtual-clock poll cadence. Rounds fire at `start + n * period` plus an
/// optional seeded jitter in `[0, jitter_ms]`.
#[derive(Debug, Clone)]
pub struct Poller {
    schedule: PollSchedule,
    start_ms: u64,
    rounds: u64,
    next_due_ms: u64,
    rng: ChaCha8Rng,
}

impl Poller {
    pub fn new(schedule: PollSchedule, start_ms: u64, seed: u64) -> Result<Self, CollectorError> {
        if schedule.period_ms == 0 {
            return Err(CollectorError::ZeroPeriod);
        }
        let mut p = Poller {
            schedule,
            start_ms,
            rounds: 0,
            next_due_ms: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        p.next_due_ms = p.due_for(1);
        Ok(p)
    }

    fn due_for(&mut self, round: u64) -> u64 {
        let jitter = if self.schedule.jitter_ms > 0 {
            self.rng.gen_range(0..=self.schedule.jitter_ms)
        } else {
            0
        };
        self.start_ms + round * self.schedule.period_ms + jitter
    }

    pub fn schedule(&self) -> PollSchedule {
        self.schedule
    }

    pub fn next_due_ms(&self) -> u64 {
        self.next_due_ms
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// Changes the period from the current instant onward.
    pub fn reschedule(&mut self, schedule: PollSchedule, now_ms: u64) -> Result<(), CollectorError> {
        if schedule.period_ms == 0 {
            return Err(CollectorError::ZeroPeriod);
        }
        self.schedule = schedule;
        self.start_ms = now_ms;
        self.rounds = 0;
        self.next_due_ms = self.due_for(1);
        Ok(())
    }

    /// Polls if the network clock has reached the next due instant.
    pub fn poll_if_due(&mut self, net: &SimNetwork) -> Option<Vec<RawSample>> {
        if net.now_ms() < self.next_due_ms {
            return None;
        }
        let round = poll_round(net);
        self.rounds += 1;
        self.next_due_ms = self.due_for(self.rounds + 1);
        Some(round)
    }

    /// Steps the network in ticks of at most `tick_ms` up to the next due
    /// instant, then polls.
    pub fn run_period(
        &mut self,
        net: &mut SimNetwork,
        tick_ms: u64,
    ) -> Result<Vec<RawSample>, CollectorError> {
        if tick_ms == 0 {
            return Err(CollectorError::ZeroTick);
        }
        loop {
            if let Some(round) = self.poll_if_due(net) {
                return Ok(round);
            }
            let dt = tick_ms.min(self.next_due_ms - net.now_ms());
            net.step(dt)?;
        }
    }
}

/// Handle to a background poller thread.
pub struct PollerTask {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<Result<u64, CollectorError>>>,
}

impl PollerTask {
    /// Requests a stop and waits; returns the number of delivered rounds.
    pub fn stop(mut self) -> Result<u64, CollectorError> {
        self.stop.store(true, Ordering::SeqCst);
        self.join_inner()
    }

    /// Waits for the task to finish on its own (period limit or sink error).
    pub fn join(mut self) -> Result<u64, CollectorError> {
        self.join_inner()
    }

    fn join_inner(&mut self) -> Result<u64, CollectorError> {
        self.handle
            .take()
            .expect("joined once")
            .join()
            .expect("poller thread panicked")
    }
}

impl Drop for PollerTask {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Spawns a poller that drives the shared network's clock from one period
/// boundary to the next, delivering every round to `sink`. Runs until
/// stopped, until `max_periods` rounds were delivered, or until the sink
/// closes.
pub fn run_poller<S>(
    net: Arc<Mutex<SimNetwork>>,
    schedule: PollSchedule,
    tick_ms: u64,
    mut sink: S,
    max_periods: Option<u64>,
) -> Result<PollerTask, CollectorError>
where
    S: SampleSink + Send + 'static,
{
    if tick_ms == 0 {
        return Err(CollectorError::ZeroTick);
    }
    let start = net.lock().expect("network lock").now_ms();
    let mut poller = Poller::new(schedule, start, 0)?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let handle = std::thread::spawn(move || {
        let mut delivered = 0u64;
        while !flag.load(Ordering::SeqCst) && max_periods.is_none_or(|m| delivered < m) {
            let round = {
                let mut guard = net.lock().expect("network lock");
                poller.run_period(&mut guard, tick_ms)?
            };
            sink.deliver(round)?;
            delivered += 1;
        }
        Ok(delivered)
    });
    Ok(PollerTask {
        stop,
        handle: Some(handle),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{
        build_topology, Demand, DeviceSpec, Endpoint, LinkSpec, SubnetAttachment, TopologySpec,
        TrafficProfile, VirtualClock, DEFAULT_EPOCH_MS, MS_PER_HOUR,
    };
    use std::collections::BTreeMap;

    fn demo() -> SimNetwork {
        build_topology(
            TopologySpec::hybrid_demo(),
            TrafficProfile::demo_default(),
            VirtualClock::new(DEFAULT_EPOCH_MS, 3600.0),
        )
        .unwrap()
    }

    fn per_interface(samples: &[RawSample]) -> BTreeMap<(Ipv4Addr, String), Vec<u64>> {
        let mut m: BTreeMap<_, Vec<u64>> = BTreeMap::new();
        for s in samples {
            m.entry((s.host_ip, s.interface.clone()))
                .or_default()
                .push(s.timestamp_ms);
        }
        m
    }

    #[test]
    fn traditional_poll_is_structural() {
        let net = demo();
        let s = poll_traditional(&net, "R2").unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|x| x.src == Source::Collectd
            && x.host_ip == Ipv4Addr::new(10, 0, 0, 11)
            && x.timestamp_ms == DEFAULT_EPOCH_MS
            && x.counters == CounterSet::default()));
        assert_eq!(
            poll_traditional(&net, "S1"),
            Err(SimError::WrongDeviceKind("S1".into()))
        );
    }

    #[test]
    fn carries_exact_counter_values() {
        // Single router whose one link carries a known volume.
        let spec = TopologySpec {
            devices: vec![
                DeviceSpec {
                    id: "R1".into(),
                    kind: DeviceKind::Traditional,
                    mgmt_ip: Ipv4Addr::new(10, 0, 0, 10),
                },
                DeviceSpec {
                    id: "R2".into(),
                    kind: DeviceKind::Traditional,
                    mgmt_ip: Ipv4Addr::new(10, 0, 0, 11),
                },
            ],
            links: vec![LinkSpec {
                endpoint_a: Endpoint::new("R1", "FastEthernet0_1"),
                endpoint_b: Endpoint::new("R2", "FastEthernet0_1"),
                capacity_bps: 1_000_000_000,
            }],
            subnets: [
                (
                    "10.0.1.0/24".parse().unwrap(),
                    SubnetAttachment {
                        device: "R1".into(),
                        interface: "FastEthernet0_0".into(),
                        capacity_bps: None,
                    },
                ),
                (
                    "10.0.2.0/24".parse().unwrap(),
                    SubnetAttachment {
                        device: "R2".into(),
                        interface: "FastEthernet0_0".into(),
                        capacity_bps: None,
                    },
                ),
            ]
            .into(),
        };
        let profile = TrafficProfile {
            demands: vec![Demand {
                src_prefix: "10.0.1.0/24".parse().unwrap(),
                dst_prefix: "10.0.2.0/24".parse().unwrap(),
                hourly_mean_bps: vec![18_102_066.0 * 8.0; 24],
                noise_sigma_bps: 0.0,
            }],
            rng_seed: 0,
        };
        let mut net = build_topology(spec, profile, VirtualClock::new(0, 1.0)).unwrap();
        net.step(1000).unwrap();
        let s = poll_traditional(&net, "R1").unwrap();
        let fa01 = s.iter().find(|x| x.interface == "FastEthernet0_1").unwrap();
        assert_eq!(fa01.counters.out_octets, 18_102_066);
        assert_eq!(fa01.counters.out_pkts, 18_103);
        assert_eq!(fa01.host_ip, Ipv4Addr::new(10, 0, 0, 10));
    }

    #[test]
    fn tagging_preserves_reference_counters() {
        let counters = CounterSet {
            in_octets: 18_050_215,
            out_octets: 18_102_066,
            in_pkts: 77_062,
            out_pkts: 77_063,
            in_discards: 0,
            out_discards: 0,
        };
        let raw = RawSample::tagged(
            Source::Collectd,
            CounterSample {
                host_ip: Ipv4Addr::new(10, 0, 0, 10),
                interface: "FastEthernet0_1".into(),
                counters,
                timestamp_ms: 1_523_138_724_218,
            },
        );
        assert_eq!(raw.counters, counters);
        assert_eq!(raw.src, Source::Collectd);
        assert_eq!(raw.host_ip.to_string(), "10.0.0.10");
    }

    #[test]
    fn sdn_poll_is_per_port() {
        let mut net = demo();
        let first = poll_sdn(&net);
        assert_eq!(first.len(), 10);
        assert!(first.iter().all(|s| s.src == Source::Sdn));
        let s1: Vec<_> = first
            .iter()
            .filter(|s| s.host_ip == Ipv4Addr::new(10, 0, 0, 20))
            .collect();
        assert_eq!(s1.len(), 3);
        net.step(MS_PER_HOUR).unwrap();
        let second = poll_sdn(&net);
        let out = |v: &[RawSample], name: &str| {
            v.iter()
                .find(|s| s.host_ip == Ipv4Addr::new(10, 0, 0, 20) && s.interface == name)
                .unwrap()
                .counters
                .out_octets
        };
        assert!(out(&second, "eth1") > out(&first, "eth1"));
        assert_eq!(out(&second, "eth2"), out(&first, "eth2"));
    }

    #[test]
    fn no_switches_empty_sdn_poll() {
        let mut spec = TopologySpec::hybrid_demo();
        spec.devices.retain(|d| d.kind == DeviceKind::Traditional);
        spec.links.retain(|l| l.endpoint_a.device.starts_with('R'));
        spec.subnets.retain(|_, a| a.device.starts_with('R'));
        let mut profile = TrafficProfile::demo_default();
        profile.demands.truncate(1);
        let net = build_topology(spec, profile, VirtualClock::new(0, 1.0)).unwrap();
        assert!(poll_sdn(&net).is_empty());
    }

    #[test]
    fn round_order_is_sorted() {
        let round = poll_round(&demo());
        let keys: Vec<_> = round
            .iter()
            .map(|s| (s.src, s.host_ip, s.interface.clone()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn polling_is_pure() {
        let net = demo();
        let before = net.routing_snapshot();
        let a = poll_round(&net);
        let b = poll_round(&net);
        assert_eq!(a, b);
        assert_eq!(net.routing_snapshot(), before);
    }

    fn cadence(hours: u64) {
        let mut net = demo();
        let mut poller = Poller::new(PollSchedule::default(), net.now_ms(), 0).unwrap();
        let mut sink = Vec::new();
        for _ in 0..hours {
            let round = poller.run_period(&mut net, 15 * 60_000).unwrap();
            sink.deliver(round).unwrap();
        }
        for times in per_interface(&sink).values() {
            assert_eq!(times.len() as u64, hours);
            for w in times.windows(2) {
                assert_eq!(w[1] - w[0], MS_PER_HOUR);
            }
        }
    }

    #[test]
    fn seventy_two_hourly_polls() {
        cadence(72);
    }

    #[test]
    fn twenty_four_hourly_polls() {
        cadence(24);
    }

    #[test]
    fn jitter_stays_within_bound() {
        let mut net = demo();
        let sched = PollSchedule {
            period_ms: MS_PER_HOUR,
            jitter_ms: 60_000,
        };
        let mut poller = Poller::new(sched, net.now_ms(), 9).unwrap();
        for n in 1..=10u64 {
            let round = poller.run_period(&mut net, MS_PER_HOUR).unwrap();
            let t = round[0].timestamp_ms - DEFAULT_EPOCH_MS;
            assert!(t >= n * MS_PER_HOUR && t <= n * MS_PER_HOUR + 60_000);
        }
    }

    #[test]
    fn zero_period_rejected() {
        let sched = PollSchedule {
            period_ms: 0,
            jitter_ms: 0,
        };
        assert_eq!(Poller::new(sched, 0, 0).unwrap_err(), CollectorError::ZeroPeriod);
    }

    #[test]
    fn background_task_delivers_exact_periods() {
        let net = Arc::new(Mutex::new(demo()));
        let (tx, rx) = mpsc::sync_channel(1);
        let task = run_poller(net.clone(), PollSchedule::default(), MS_PER_HOUR, tx, Some(5)).unwrap();
        let rounds: Vec<Vec<RawSample>> = rx.iter().collect();
        assert_eq!(task.join().unwrap(), 5);
        assert_eq!(rounds.len(), 5);
        let all: Vec<RawSample> = rounds.into_iter().flatten().collect();
        assert!(per_interface(&all).values().all(|t| t.len() == 5));
        assert_eq!(net.lock().unwrap().now_ms(), DEFAULT_EPOCH_MS + 5 * MS_PER_HOUR);
    }

    #[test]
    fn stopped_task_delivers_nothing_more() {
        let net = Arc::new(Mutex::new(demo()));
        let (tx, rx) = mpsc::channel();
        let task = run_poller(net, PollSchedule::default(), MS_PER_HOUR, tx, None).unwrap();
        let mut seen = 0u64;
        while seen < 5 {
            rx.recv().unwrap();
            seen += 1;
        }
        let delivered = task.stop().unwrap();
        let rest: Vec<_> = rx.try_iter().collect();
        assert_eq!(seen + rest.len() as u64, delivered);
        // Sender dropped with the thread: no further deliveries are possible.
        assert!(rx.recv().is_err());
    }

    #[test]
    fn closed_sink_ends_task() {
        let net = Arc::new(Mutex::new(demo()));
        let (tx, rx) = mpsc::channel();
        drop(rx);
        let task = run_poller(net, PollSchedule::default(), MS_PER_HOUR, tx, None).unwrap();
        assert_eq!(task.join(), Err(CollectorError::SinkClosed(SinkClosed)));
    }
}
