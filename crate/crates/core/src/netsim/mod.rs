//! In-process hybrid network: traditional routers steered by local preference
//! and SDN switches steered by priority-ordered flow tables, driven by a
//! diurnal traffic generator under a virtual clock.

mod clock;
mod topology;
mod traffic;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clock::{hour_of_day, VirtualClock, MS_PER_DAY, MS_PER_HOUR};
pub use topology::{
    DeviceKind, DeviceSpec, Endpoint, LinkSpec, SubnetAttachment, TopologySpec,
    DEFAULT_EDGE_CAPACITY_BPS,
};
pub use traffic::{Demand, Injection, TrafficProfile, BUSINESS_HOURS};

pub const DEFAULT_LOCAL_PREFERENCE: u32 = 100;
pub const BASELINE_FLOW_PRIORITY: u32 = 100;
pub const PACKET_SIZE_OCTETS: u64 = 1_000;

/// 2018-04-07T00:00:00Z.
pub const DEFAULT_EPOCH_MS: u64 = 1_523_059_200_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("duplicate device id {0}")]
    DuplicateDeviceId(String),
    #[error("link endpoint references unknown device {0}")]
    DanglingEndpoint(String),
    #[error("capacity must be positive")]
    NonPositiveCapacity,
    #[error("subnet {0} is not attached to an existing device")]
    SubnetUnattached(Ipv4Net),
    #[error("interface {device}/{interface} is used more than once")]
    InterfaceInUse { device: String, interface: String },
    #[error("link connects {0} to itself")]
    SelfLoop(String),
    #[error("invalid traffic profile: {0}")]
    BadProfile(String),
    #[error("time step must be positive")]
    ZeroInterval,
    #[error("unknown prefix {0}")]
    UnknownPrefix(Ipv4Net),
    #[error("no path from {src} to {dst}")]
    NoPath { src: Ipv4Net, dst: Ipv4Net },
    #[error("unknown router {0}")]
    UnknownRouter(String),
    #[error("unknown switch {0}")]
    UnknownSwitch(String),
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("device {0} is not a traditional router")]
    WrongDeviceKind(String),
    #[error("unknown interface {interface} on {device}")]
    UnknownInterface { device: String, interface: String },
    #[error("unknown port {port} on {switch}")]
    UnknownPort { switch: String, port: String },
    #[error("cookie {cookie} already installed on {switch}")]
    DuplicateCookie { switch: String, cookie: u64 },
    #[error("no flow with cookie {cookie} on {switch}")]
    UnknownCookie { switch: String, cookie: u64 },
    #[error("local preference must be positive")]
    InvalidPreference,
    #[error("no demand from {src} to {dst}")]
    UnknownDemand { src: Ipv4Net, dst: Ipv4Net },
    #[error("injection factor must be positive and finite")]
    InvalidFactor,
}

/// The six 32-bit wrapping interface counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CounterSet {
    pub in_octets: u32,
    pub out_octets: u32,
    pub in_pkts: u32,
    pub out_pkts: u32,
    pub in_discards: u32,
    pub out_discards: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interface {
    pub name: String,
    pub capacity_bps: u64,
    pub counters: CounterSet,
    /// Far end when this interface terminates an inter-device link.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peer: Option<Endpoint>,
    /// Attached subnet when this is an edge port.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subnet: Option<Ipv4Net>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectiveMode {
    Set,
    Clear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteMapDirective {
    pub router_id: String,
    pub prefix: Ipv4Net,
    pub egress_interface: String,
    pub local_preference: u32,
    pub mode: DirectiveMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEntry {
    pub switch_id: String,
    pub cookie: u64,
    pub priority: u32,
    pub match_dst_prefix: Ipv4Net,
    pub action_out_port: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_timeout_s: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InstalledFlow {
    entry: FlowEntry,
    installed_at_ms: u64,
}

impl InstalledFlow {
    fn expired(&self, now_ms: u64) -> bool {
        self.entry
            .hard_timeout_s
            .is_some_and(|t| now_ms >= self.installed_at_ms + t * 1000)
    }
}

/// One forwarding decision: leave `device` through `egress`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Hop {
    pub device: String,
    pub egress: String,
}

impl Hop {
    pub fn new(device: impl Into<String>, egress: impl Into<String>) -> Self {
        Self {
            device: device.into(),
            egress: egress.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterSample {
    pub host_ip: Ipv4Addr,
    pub interface: String,
    pub counters: CounterSet,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgressLoad {
    pub device: String,
    pub interface: String,
    pub offered_bps: f64,
    pub carried_bps: f64,
    pub octets: u64,
    pub dropped_octets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopLoad {
    pub device: String,
    pub egress: String,
    pub carried_bps: f64,
    /// This demand's share of the octets carried on the egress.
    pub octets: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandReport {
    pub src_prefix: Ipv4Net,
    pub dst_prefix: Ipv4Net,
    pub offered_bps: f64,
    pub hops: Vec<HopLoad>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unroutable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub start_ms: u64,
    pub end_ms: u64,
    pub links: Vec<EgressLoad>,
    pub demands: Vec<DemandReport>,
}

#[derive(Debug, Clone)]
struct Device {
    spec: DeviceSpec,
    interfaces: BTreeMap<String, Interface>,
    /// Route-map local-preference overrides keyed by (prefix, egress).
    overrides: BTreeMap<(Ipv4Net, String), u32>,
    flows: BTreeMap<u64, InstalledFlow>,
}

/// All (src, dst) resolution results, used to compare routing functions.
pub type RoutingSnapshot = BTreeMap<(Ipv4Net, Ipv4Net), Option<Vec<Hop>>>;

#[derive(Debug, Clone)]
pub struct SimNetwork {
    topology: TopologySpec,
    profile: TrafficProfile,
    devices: BTreeMap<String, Device>,
    /// Loop-free next-hop egresses per (device, prefix), ascending by name.
    candidates: BTreeMap<(String, Ipv4Net), Vec<String>>,
    attachments: BTreeMap<Ipv4Net, Endpoint>,
    clock: VirtualClock,
    rng: ChaCha8Rng,
    injections: Vec<Injection>,
}

pub fn build_topology(
    spec: TopologySpec,
    profile: TrafficProfile,
    clock: VirtualClock,
) -> Result<SimNetwork, SimError> {
    spec.validate()?;
    profile.validate(&spec)?;

    let mut devices: BTreeMap<String, Device> = spec
        .devices
        .iter()
        .map(|d| {
            (
                d.id.clone(),
                Device {
                    spec: d.clone(),
                    interfaces: BTreeMap::new(),
                    overrides: BTreeMap::new(),
                    flows: BTreeMap::new(),
                },
            )
        })
        .collect();
    for link in &spec.links {
        for (near, far) in [
            (&link.endpoint_a, &link.endpoint_b),
            (&link.endpoint_b, &link.endpoint_a),
        ] {
            devices.get_mut(&near.device).expect("validated").interfaces.insert(
                near.interface.clone(),
                Interface {
                    name: near.interface.clone(),
                    capacity_bps: link.capacity_bps,
                    counters: CounterSet::default(),
                    peer: Some(far.clone()),
                    subnet: None,
                },
            );
        }
    }
    let mut attachments = BTreeMap::new();
    for (prefix, att) in &spec.subnets {
        devices.get_mut(&att.device).expect("validated").interfaces.insert(
            att.interface.clone(),
            Interface {
                name: att.interface.clone(),
                capacity_bps: att.capacity_bps.unwrap_or(DEFAULT_EDGE_CAPACITY_BPS),
                counters: CounterSet::default(),
                peer: None,
                subnet: Some(*prefix),
            },
        );
        attachments.insert(*prefix, Endpoint::new(&att.device, &att.interface));
    }

    let candidates = loop_free_candidates(&devices, &attachments);

    // Baseline flows: one per (switch, reachable subnet) on the first candidate.
    let mut cookie = 1u64;
    for ((dev, prefix), egresses) in &candidates {
        let device = devices.get_mut(dev).expect("candidate device exists");
        if device.spec.kind != DeviceKind::SdnSwitch {
            continue;
        }
        let entry = FlowEntry {
            switch_id: dev.clone(),
            cookie,
            priority: BASELINE_FLOW_PRIORITY,
            match_dst_prefix: *prefix,
            action_out_port: egresses[0].clone(),
            hard_timeout_s: None,
        };
        device.flows.insert(
            cookie,
            InstalledFlow {
                entry,
                installed_at_ms: clock.now_ms(),
            },
        );
        cookie += 1;
    }

    let rng = ChaCha8Rng::seed_from_u64(profile.rng_seed);
    Ok(SimNetwork {
        topology: spec,
        profile,
        devices,
        candidates,
        attachments,
        clock,
        rng,
        injections: Vec::new(),
    })
}

/// For each subnet, BFS hop distance from its attachment device; an egress is
/// a candidate when its peer is strictly closer to the subnet.
fn loop_free_candidates(
    devices: &BTreeMap<String, Device>,
    attachments: &BTreeMap<Ipv4Net, Endpoint>,
) -> BTreeMap<(String, Ipv4Net), Vec<String>> {
    let mut out = BTreeMap::new();
    for (prefix, att) in attachments {
        let mut dist: BTreeMap<&str, usize> = BTreeMap::new();
        let mut queue = VecDeque::new();
        dist.insert(att.device.as_str(), 0);
        queue.push_back(att.device.as_str());
        while let Some(d) = queue.pop_front() {
            let here = dist[d];
            for iface in devices[d].interfaces.values() {
                if let Some(peer) = &iface.peer {
                    if !dist.contains_key(peer.device.as_str()) {
                        dist.insert(peer.device.as_str(), here + 1);
                        queue.push_back(peer.device.as_str());
                    }
                }
            }
        }
        for (&dev, &d) in &dist {
            let egresses: Vec<String> = if d == 0 {
                vec![att.interface.clone()]
            } else {
                devices[dev]
                    .interfaces
                    .values()
                    .filter(|i| {
                        i.peer
                            .as_ref()
                            .is_some_and(|p| dist.get(p.device.as_str()).is_some_and(|&pd| pd < d))
                    })
                    .map(|i| i.name.clone())
                    .collect()
            };
            out.insert((dev.to_string(), *prefix), egresses);
        }
    }
    out
}

impl SimNetwork {
    pub fn topology(&self) -> &TopologySpec {
        &self.topology
    }

    pub fn profile(&self) -> &TrafficProfile {
        &self.profile
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn reseed(&mut self, seed: u64) {
        self.profile.rng_seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn device_kind(&self, id: &str) -> Option<DeviceKind> {
        self.devices.get(id).map(|d| d.spec.kind)
    }

    pub fn device_by_ip(&self, ip: Ipv4Addr) -> Option<&DeviceSpec> {
        self.devices
            .values()
            .map(|d| &d.spec)
            .find(|s| s.mgmt_ip == ip)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceSpec> {
        self.devices.values().map(|d| &d.spec)
    }

    pub fn interface(&self, device: &str, name: &str) -> Option<&Interface> {
        self.devices.get(device)?.interfaces.get(name)
    }

    pub fn interfaces(&self, device: &str) -> impl Iterator<Item = &Interface> {
        self.devices
            .get(device)
            .into_iter()
            .flat_map(|d| d.interfaces.values())
    }

    pub fn subnets(&self) -> impl Iterator<Item = &Ipv4Net> {
        self.attachments.keys()
    }

    pub fn injections(&self) -> &[Injection] {
        &self.injections
    }

    /// Loop-free egresses of `device` toward `prefix`, ascending by name.
    pub fn candidate_egresses(&self, device: &str, prefix: Ipv4Net) -> &[String] {
        self.candidates
            .get(&(device.to_string(), prefix))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Effective local preferences on a router, per prefix and egress.
    pub fn route_table(&self, router: &str) -> BTreeMap<Ipv4Net, BTreeMap<String, u32>> {
        let mut table: BTreeMap<Ipv4Net, BTreeMap<String, u32>> = BTreeMap::new();
        let Some(dev) = self.devices.get(router) else {
            return table;
        };
        if dev.spec.kind != DeviceKind::Traditional {
            return table;
        }
        for ((d, prefix), egresses) in &self.candidates {
            if d == router {
                let row = table.entry(*prefix).or_default();
                for e in egresses {
                    row.insert(e.clone(), DEFAULT_LOCAL_PREFERENCE);
                }
            }
        }
        for ((prefix, egress), pref) in &dev.overrides {
            table.entry(*prefix).or_default().insert(egress.clone(), *pref);
        }
        table
    }

    /// Flow table of a switch, ascending by cookie.
    pub fn flow_table(&self, switch: &str) -> Vec<FlowEntry> {
        self.devices
            .get(switch)
            .map(|d| d.flows.values().map(|f| f.entry.clone()).collect())
            .unwrap_or_default()
    }

    fn next_hop(&self, device: &Device, dst: Ipv4Net) -> Option<String> {
        match device.spec.kind {
            DeviceKind::Traditional => {
                if let Some(att) = self.attachments.get(&dst) {
                    if att.device == device.spec.id {
                        return Some(att.interface.clone());
                    }
                }
                let mut prefs: BTreeMap<&str, u32> = self
                    .candidate_egresses(&device.spec.id, dst)
                    .iter()
                    .map(|e| (e.as_str(), DEFAULT_LOCAL_PREFERENCE))
                    .collect();
                for ((prefix, egress), pref) in &device.overrides {
                    if *prefix == dst {
                        prefs.insert(egress.as_str(), *pref);
                    }
                }
                // Highest preference; ties go to the smallest name (BTreeMap order).
                prefs
                    .into_iter()
                    .fold(None::<(&str, u32)>, |best, (e, p)| match best {
                        Some((_, bp)) if bp >= p => best,
                        _ => Some((e, p)),
                    })
                    .map(|(e, _)| e.to_string())
            }
            DeviceKind::SdnSwitch => device
                .flows
                .values()
                .filter(|f| f.entry.match_dst_prefix.contains(&dst))
                .min_by(|a, b| {
                    b.entry
                        .priority
                        .cmp(&a.entry.priority)
                        .then(
                            b.entry
                                .match_dst_prefix
                                .prefix_len()
                                .cmp(&a.entry.match_dst_prefix.prefix_len()),
                        )
                        .then(a.entry.cookie.cmp(&b.entry.cookie))
                })
                .map(|f| f.entry.action_out_port.clone()),
        }
    }

    pub fn resolve_path(&self, src: Ipv4Net, dst: Ipv4Net) -> Result<Vec<Hop>, SimError> {
        let start = self
            .attachments
            .get(&src)
            .ok_or(SimError::UnknownPrefix(src))?;
        if !self.attachments.contains_key(&dst) {
            return Err(SimError::UnknownPrefix(dst));
        }
        let no_path = || SimError::NoPath { src, dst };
        let mut path = Vec::new();
        let mut visited = BTreeSet::new();
        let mut current = start.device.clone();
        loop {
            if !visited.insert(current.clone()) {
                return Err(no_path());
            }
            let device = &self.devices[&current];
            let egress = self.next_hop(device, dst).ok_or_else(no_path)?;
            let iface = device.interfaces.get(&egress).ok_or_else(no_path)?;
            path.push(Hop::new(&current, &egress));
            match (&iface.peer, iface.subnet) {
                (Some(peer), _) => current = peer.device.clone(),
                (None, Some(subnet)) if subnet == dst => return Ok(path),
                _ => return Err(no_path()),
            }
        }
    }

    pub fn routing_snapshot(&self) -> RoutingSnapshot {
        let prefixes: Vec<Ipv4Net> = self.attachments.keys().copied().collect();
        let mut out = BTreeMap::new();
        for &s in &prefixes {
            for &d in &prefixes {
                if s != d {
                    out.insert((s, d), self.resolve_path(s, d).ok());
                }
            }
        }
        out
    }

    pub fn apply_route_map(&mut self, directive: &RouteMapDirective) -> Result<(), SimError> {
        let dev = self
            .devices
            .get_mut(&directive.router_id)
            .filter(|d| d.spec.kind == DeviceKind::Traditional)
            .ok_or_else(|| SimError::UnknownRouter(directive.router_id.clone()))?;
        if !dev.interfaces.contains_key(&directive.egress_interface) {
            return Err(SimError::UnknownInterface {
                device: directive.router_id.clone(),
                interface: directive.egress_interface.clone(),
            });
        }
        let key = (directive.prefix, directive.egress_interface.clone());
        match directive.mode {
            DirectiveMode::Set => {
                if directive.local_preference == 0 {
                    return Err(SimError::InvalidPreference);
                }
                dev.overrides.insert(key, directive.local_preference);
            }
            DirectiveMode::Clear => {
                dev.overrides.remove(&key);
            }
        }
        Ok(())
    }

    pub fn install_flow(&mut self, entry: &FlowEntry) -> Result<(), SimError> {
        let now = self.clock.now_ms();
        let dev = self
            .devices
            .get_mut(&entry.switch_id)
            .filter(|d| d.spec.kind == DeviceKind::SdnSwitch)
            .ok_or_else(|| SimError::UnknownSwitch(entry.switch_id.clone()))?;
        if !dev.interfaces.contains_key(&entry.action_out_port) {
            return Err(SimError::UnknownPort {
                switch: entry.switch_id.clone(),
                port: entry.action_out_port.clone(),
            });
        }
        if dev.flows.contains_key(&entry.cookie) {
            return Err(SimError::DuplicateCookie {
                switch: entry.switch_id.clone(),
                cookie: entry.cookie,
            });
        }
        dev.flows.insert(
            entry.cookie,
            InstalledFlow {
                entry: entry.clone(),
                installed_at_ms: now,
            },
        );
        Ok(())
    }

    pub fn remove_flow(&mut self, switch_id: &str, cookie: u64) -> Result<FlowEntry, SimError> {
        let dev = self
            .devices
            .get_mut(switch_id)
            .filter(|d| d.spec.kind == DeviceKind::SdnSwitch)
            .ok_or_else(|| SimError::UnknownSwitch(switch_id.to_string()))?;
        dev.flows
            .remove(&cookie)
            .map(|f| f.entry)
            .ok_or(SimError::UnknownCookie {
                switch: switch_id.to_string(),
                cookie,
            })
    }

    /// Scales the (src, dst) demand by `factor` for `duration_ms` from now.
    pub fn inject(
        &mut self,
        src: Ipv4Net,
        dst: Ipv4Net,
        factor: f64,
        duration_ms: u64,
    ) -> Result<Injection, SimError> {
        if !factor.is_finite() || factor <= 0.0 {
            return Err(SimError::InvalidFactor);
        }
        if !self
            .profile
            .demands
            .iter()
            .any(|d| d.src_prefix == src && d.dst_prefix == dst)
        {
            return Err(SimError::UnknownDemand { src, dst });
        }
        let now = self.clock.now_ms();
        let inj = Injection {
            src_prefix: src,
            dst_prefix: dst,
            factor,
            start_ms: now,
            end_ms: now + duration_ms,
        };
        self.injections.push(inj.clone());
        Ok(inj)
    }

    pub fn read_counters(&self, device_id: &str) -> Result<Vec<CounterSample>, SimError> {
        let dev = self
            .devices
            .get(device_id)
            .ok_or_else(|| SimError::UnknownDevice(device_id.to_string()))?;
        if dev.spec.kind != DeviceKind::Traditional {
            return Err(SimError::WrongDeviceKind(device_id.to_string()));
        }
        Ok(self.snapshot(dev))
    }

    pub fn read_flow_stats(&self) -> Vec<CounterSample> {
        self.devices
            .values()
            .filter(|d| d.spec.kind == DeviceKind::SdnSwitch)
            .flat_map(|d| self.snapshot(d))
            .collect()
    }

    fn snapshot(&self, dev: &Device) -> Vec<CounterSample> {
        let now = self.clock.now_ms();
        dev.interfaces
            .values()
            .map(|i| CounterSample {
                host_ip: dev.spec.mgmt_ip,
                interface: i.name.clone(),
                counters: i.counters,
                timestamp_ms: now,
            })
            .collect()
    }

    fn offered_bps(&self, demand: &Demand, hour: u8, now_ms: u64, z: f64) -> f64 {
        let scale: f64 = self
            .injections
            .iter()
            .filter(|i| {
                i.src_prefix == demand.src_prefix
                    && i.dst_prefix == demand.dst_prefix
                    && i.active_at(now_ms)
            })
            .map(|i| i.factor)
            .product();
        let mean = demand.hourly_mean_bps[hour as usize] * scale;
        (mean + demand.noise_sigma_bps * z).max(0.0)
    }

    /// Advances the network by `dt_ms` of virtual time, carrying one interval
    /// of traffic at the current hour's offered load.
    pub fn step(&mut self, dt_ms: u64) -> Result<TickReport, SimError> {
        if dt_ms == 0 {
            return Err(SimError::ZeroInterval);
        }
        let start_ms = self.clock.now_ms();
        let hour = self.clock.hour_of_day();

        let mut offered = Vec::with_capacity(self.profile.demands.len());
        let mut paths = Vec::with_capacity(self.profile.demands.len());
        let demands = self.profile.demands.clone();
        for demand in &demands {
            // One draw per demand per tick, regardless of sigma, keeps the
            // random stream independent of the noise setting.
            let z: f64 = StandardNormal.sample(&mut self.rng);
            offered.push(self.offered_bps(demand, hour, start_ms, z));
            paths.push(self.resolve_path(demand.src_prefix, demand.dst_prefix));
        }

        // Propagate rates hop by hop; a shared egress scales every demand
        // through it proportionally when oversubscribed.
        let max_len = paths
            .iter()
            .filter_map(|p| p.as_ref().ok().map(Vec::len))
            .max()
            .unwrap_or(0);
        let mut arriving: Vec<Vec<f64>> = paths
            .iter()
            .zip(&offered)
            .map(|(p, &o)| match p {
                Ok(hops) => {
                    let mut v = vec![0.0; hops.len()];
                    if let Some(first) = v.first_mut() {
                        *first = o;
                    }
                    v
                }
                Err(_) => Vec::new(),
            })
            .collect();
        let mut totals: BTreeMap<&Hop, f64> = BTreeMap::new();
        let mut scale: BTreeMap<&Hop, f64> = BTreeMap::new();
        for _ in 0..=max_len {
            totals.clear();
            for (p, rates) in paths.iter().zip(&arriving) {
                if let Ok(hops) = p {
                    for (hop, r) in hops.iter().zip(rates) {
                        *totals.entry(hop).or_default() += r;
                    }
                }
            }
            scale = totals
                .iter()
                .map(|(&hop, &total)| {
                    let cap = self.devices[&hop.device].interfaces[&hop.egress].capacity_bps as f64;
                    let s = if total > cap { cap / total } else { 1.0 };
                    (hop, s)
                })
                .collect();
            for (p, rates) in paths.iter().zip(arriving.iter_mut()) {
                if let Ok(hops) = p {
                    for k in 1..hops.len() {
                        rates[k] = rates[k - 1] * scale[&hops[k - 1]];
                    }
                }
            }
        }

        let dt_s = dt_ms as f64 / 1000.0;
        let mut links = Vec::with_capacity(totals.len());
        for (&hop, &total) in &totals {
            let cap = self.devices[&hop.device].interfaces[&hop.egress].capacity_bps as f64;
            let carried = total.min(cap);
            let octets = (carried * dt_s / 8.0).floor() as u64;
            let offered_octets = (total * dt_s / 8.0).floor() as u64;
            let dropped = offered_octets.saturating_sub(octets);
            links.push(EgressLoad {
                device: hop.device.clone(),
                interface: hop.egress.clone(),
                offered_bps: total,
                carried_bps: carried,
                octets,
                dropped_octets: dropped,
            });
        }

        let demands = self
            .profile
            .demands
            .iter()
            .zip(&paths)
            .zip(&arriving)
            .zip(&offered)
            .map(|(((d, p), rates), &o)| match p {
                Ok(hops) => DemandReport {
                    src_prefix: d.src_prefix,
                    dst_prefix: d.dst_prefix,
                    offered_bps: o,
                    hops: hops
                        .iter()
                        .zip(rates)
                        .map(|(h, r)| {
                            let carried = r * scale[h];
                            HopLoad {
                                device: h.device.clone(),
                                egress: h.egress.clone(),
                                carried_bps: carried,
                                octets: carried * dt_s / 8.0,
                            }
                        })
                        .collect(),
                    unroutable: None,
                },
                Err(e) => DemandReport {
                    src_prefix: d.src_prefix,
                    dst_prefix: d.dst_prefix,
                    offered_bps: o,
                    hops: Vec::new(),
                    unroutable: Some(e.to_string()),
                },
            })
            .collect();

        for load in &links {
            let pkts = packets(load.octets);
            let dev = self.devices.get_mut(&load.device).expect("hop device");
            let iface = dev.interfaces.get_mut(&load.interface).expect("hop interface");
            let c = &mut iface.counters;
            c.out_octets = c.out_octets.wrapping_add(load.octets as u32);
            c.out_pkts = c.out_pkts.wrapping_add(pkts);
            c.out_discards = c.out_discards.wrapping_add(packets(load.dropped_octets));
            if let Some(peer) = iface.peer.clone() {
                let far = self
                    .devices
                    .get_mut(&peer.device)
                    .and_then(|d| d.interfaces.get_mut(&peer.interface))
                    .expect("peer interface");
                far.counters.in_octets = far.counters.in_octets.wrapping_add(load.octets as u32);
                far.counters.in_pkts = far.counters.in_pkts.wrapping_add(pkts);
            }
        }

        self.clock.advance(dt_ms);
        let now = self.clock.now_ms();
        for dev in self.devices.values_mut() {
            dev.flows.retain(|_, f| !f.expired(now));
        }
        self.injections.retain(|i| i.end_ms > now);

        Ok(TickReport {
            start_ms,
            end_ms: now,
            links,
            demands,
        })
    }
}

/// Packet count for an octet volume at the fixed packet size, mod 2^32.
fn packets(octets: u64) -> u32 {
    octets.div_ceil(PACKET_SIZE_OCTETS) as u32
}
