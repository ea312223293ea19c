//! Turns confirmed trends into load-balancing decisions: picks the prefix to
//! move and an alternate egress, renders route-map directives or flow
//! entries, applies them with rollback, and reverts them on schedule.

use std::collections::{BTreeMap, BTreeSet};

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{TrendEvent, TrendTransition};
use crate::config::Violation;
use crate::netsim::{
    DeviceKind, DirectiveMode, FlowEntry, Hop, RouteMapDirective, SimError, SimNetwork, TickReport,
    DEFAULT_LOCAL_PREFERENCE,
};

/// Cookies of decision flows start here, clear of baseline cookies.
pub const DECISION_COOKIE_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionerConfig {
    pub lp_low: u32,
    pub lp_high: u32,
    pub flow_priority: u32,
    /// Decision lifetime in sample periods.
    pub duration_periods: u32,
    /// Also set a hard timeout on SDN decision flows.
    pub timeout_mode: bool,
    pub policy: Policy,
}

impl Default for ActionerConfig {
    fn default() -> Self {
        ActionerConfig {
            lp_low: 90,
            lp_high: 110,
            flow_priority: 200,
            duration_periods: 6,
            timeout_mode: true,
            policy: Policy::Auto,
        }
    }
}

impl ActionerConfig {
    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.lp_low == 0 || self.lp_low >= DEFAULT_LOCAL_PREFERENCE {
            v.push(Violation::new(
                format!("{prefix}lp_low"),
                format!("must be in [1, {DEFAULT_LOCAL_PREFERENCE})"),
            ));
        }
        if self.lp_high <= DEFAULT_LOCAL_PREFERENCE {
            v.push(Violation::new(
                format!("{prefix}lp_high"),
                format!("must exceed {DEFAULT_LOCAL_PREFERENCE}"),
            ));
        }
        if self.flow_priority <= crate::netsim::BASELINE_FLOW_PRIORITY {
            v.push(Violation::new(
                format!("{prefix}flow_priority"),
                format!("must exceed {}", crate::netsim::BASELINE_FLOW_PRIORITY),
            ));
        }
        if self.duration_periods == 0 {
            v.push(Violation::new(format!("{prefix}duration_periods"), "must be a positive integer"));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionError {
    #[error("no alternate egress on {device} toward {prefix}")]
    NoAlternatePath { device: String, prefix: Ipv4Net },
    #[error("no traffic observed on {device}/{egress} to attribute")]
    NoAffectedPrefix { device: String, egress: String },
    #[error("decision {id} is {status:?}; cannot {action}")]
    InvalidTransition {
        id: String,
        status: DecisionStatus,
        action: &'static str,
    },
    #[error("unknown decision {0}")]
    UnknownDecision(String),
    #[error(transparent)]
    Control(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Traditional,
    Sdn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionStatus {
    Planned,
    Applied,
    Reverted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "items", rename_all = "snake_case")]
pub enum Rendered {
    RouteMap(Vec<RouteMapDirective>),
    Flows(Vec<FlowEntry>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadBalanceDecision {
    pub id: String,
    pub trend_event_id: String,
    pub domain: Domain,
    pub affected_prefix: Option<Ipv4Net>,
    /// The monitored link whose trend triggered the decision.
    pub congested: Hop,
    /// Where traffic is steered: the on-path hop being replaced. Equal to
    /// `congested` unless the congested device has no alternate.
    pub steer_from: Option<Hop>,
    pub alternate: Option<Hop>,
    pub rendered: Rendered,
    pub created_at_ms: u64,
    pub applied_at_ms: Option<u64>,
    pub duration_ms: u64,
    pub reverted_at_ms: Option<u64>,
    pub status: DecisionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl LoadBalanceDecision {
    pub fn is_live(&self) -> bool {
        matches!(self.status, DecisionStatus::Planned | DecisionStatus::Applied)
    }

    pub fn revert_due_ms(&self) -> Option<u64> {
        self.applied_at_ms.map(|t| t + self.duration_ms)
    }

    fn guard(&self, want: DecisionStatus, action: &'static str) -> Result<(), ActionError> {
        if self.status != want {
            return Err(ActionError::InvalidTransition {
                id: self.id.clone(),
                status: self.status,
                action,
            });
        }
        Ok(())
    }
}

/// What the actioner needs to know about the network.
pub trait NetView {
    fn device_kind(&self, device: &str) -> Option<DeviceKind>;
    fn candidate_egresses(&self, device: &str, prefix: Ipv4Net) -> Vec<String>;
    fn utilization(&self, device: &str, egress: &str) -> f64;
}

/// The simulator plus per-egress utilization over the last sample period.
pub struct LoadView<'a> {
    pub net: &'a SimNetwork,
    pub loads: &'a PeriodLoads,
}

impl NetView for LoadView<'_> {
    fn device_kind(&self, device: &str) -> Option<DeviceKind> {
        self.net.device_kind(device)
    }

    fn candidate_egresses(&self, device: &str, prefix: Ipv4Net) -> Vec<String> {
        self.net.candidate_egresses(device, prefix).to_vec()
    }

    fn utilization(&self, device: &str, egress: &str) -> f64 {
        let cap = self
            .net
            .interface(device, egress)
            .map_or(0, |i| i.capacity_bps);
        self.loads.utilization(device, egress, cap)
    }
}

/// Traffic accumulated from tick reports since the last sample boundary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodLoads {
    duration_ms: u64,
    egress_octets: BTreeMap<Hop, f64>,
    /// Octets per (egress, dst prefix), with the path of the heaviest demand.
    by_prefix: BTreeMap<Hop, BTreeMap<Ipv4Net, (f64, Vec<Hop>)>>,
}

impl PeriodLoads {
    pub fn add(&mut self, report: &TickReport) {
        self.duration_ms += report.end_ms - report.start_ms;
        for l in &report.links {
            *self
                .egress_octets
                .entry(Hop::new(&l.device, &l.interface))
                .or_default() += l.octets as f64;
        }
        for d in &report.demands {
            let path: Vec<Hop> = d.hops.iter().map(|h| Hop::new(&h.device, &h.egress)).collect();
            for (h, hop) in d.hops.iter().zip(&path) {
                let slot = self
                    .by_prefix
                    .entry(hop.clone())
                    .or_default()
                    .entry(d.dst_prefix)
                    .or_insert((0.0, Vec::new()));
                slot.0 += h.octets;
                if slot.1.is_empty() {
                    slot.1 = path.clone();
                }
            }
        }
    }

    pub fn utilization(&self, device: &str, egress: &str, capacity_bps: u64) -> f64 {
        if self.duration_ms == 0 || capacity_bps == 0 {
            return 0.0;
        }
        let octets = self
            .egress_octets
            .get(&Hop::new(device, egress))
            .copied()
            .unwrap_or(0.0);
        octets * 8.0 * 1000.0 / (self.duration_ms as f64 * capacity_bps as f64)
    }

    /// Destination prefix carrying the most octets over `link`; ties go to
    /// the numerically lowest prefix. Returns the path it took.
    pub fn dominant_prefix(&self, link: &Hop) -> Option<(Ipv4Net, &[Hop])> {
        self.by_prefix
            .get(link)?
            .iter()
            .filter(|(_, (o, _))| *o > 0.0)
            .fold(None::<(Ipv4Net, f64, &[Hop])>, |best, (p, (o, path))| match best {
                Some((_, bo, _)) if bo >= *o => best,
                _ => Some((*p, *o, path.as_slice())),
            })
            .map(|(p, _, path)| (p, path))
    }
}

/// Lowest-utilization egress of `at.device` toward `dst` other than
/// `at.egress`; ties go to the smallest name.
pub fn choose_alternate(view: &impl NetView, at: &Hop, dst: Ipv4Net) -> Result<Hop, ActionError> {
    view.candidate_egresses(&at.device, dst)
        .into_iter()
        .filter(|e| *e != at.egress)
        .map(|e| (view.utilization(&at.device, &e), e))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
        .map(|(_, e)| Hop::new(&at.device, e))
        .ok_or_else(|| ActionError::NoAlternatePath {
            device: at.device.clone(),
            prefix: dst,
        })
}

/// The hop nearest `congested`, walking upstream along `path`, whose device
/// has an alternate egress toward `dst`.
pub fn steering_hop(view: &impl NetView, path: &[Hop], congested: &Hop, dst: Ipv4Net) -> Option<Hop> {
    let idx = path.iter().position(|h| h == congested)?;
    path[..=idx]
        .iter()
        .rev()
        .find(|h| view.candidate_egresses(&h.device, dst).iter().any(|e| *e != h.egress))
        .cloned()
}

pub fn plan_traditional(
    prefix: Ipv4Net,
    from: &Hop,
    alternate: &Hop,
    cfg: &ActionerConfig,
) -> Vec<RouteMapDirective> {
    let d = |egress: &str, pref| RouteMapDirective {
        router_id: from.device.clone(),
        prefix,
        egress_interface: egress.to_string(),
        local_preference: pref,
        mode: DirectiveMode::Set,
    };
    vec![d(&from.egress, cfg.lp_low), d(&alternate.egress, cfg.lp_high)]
}

pub fn plan_sdn(prefix: Ipv4Net, alternate: &Hop, cfg: &ActionerConfig, duration_ms: u64, cookie: u64) -> Vec<FlowEntry> {
    vec![FlowEntry {
        switch_id: alternate.device.clone(),
        cookie,
        priority: cfg.flow_priority,
        match_dst_prefix: prefix,
        action_out_port: alternate.egress.clone(),
        hard_timeout_s: cfg.timeout_mode.then(|| duration_ms.div_ceil(1000)),
    }]
}

fn clear(d: &RouteMapDirective) -> RouteMapDirective {
    RouteMapDirective {
        local_preference: DEFAULT_LOCAL_PREFERENCE,
        mode: DirectiveMode::Clear,
        ..d.clone()
    }
}

/// Applies every rendered item in order. On the first failure the items
/// already applied are undone and the decision is marked failed.
pub fn execute(decision: &mut LoadBalanceDecision, net: &mut SimNetwork, now_ms: u64) -> Result<(), ActionError> {
    decision.guard(DecisionStatus::Planned, "execute")?;
    let result = match &decision.rendered {
        Rendered::RouteMap(ds) => {
            let failed = ds.iter().position(|d| net.apply_route_map(d).is_err());
            match failed {
                Some(i) => {
                    let err = net.apply_route_map(&ds[i]).unwrap_err();
                    for d in ds[..i].iter().rev() {
                        let _ = net.apply_route_map(&clear(d));
                    }
                    Err(err)
                }
                None => Ok(()),
            }
        }
        Rendered::Flows(fs) => {
            let mut result = Ok(());
            for (i, f) in fs.iter().enumerate() {
                if let Err(e) = net.install_flow(f) {
                    for f in fs[..i].iter().rev() {
                        let _ = net.remove_flow(&f.switch_id, f.cookie);
                    }
                    result = Err(e);
                    break;
                }
            }
            result
        }
    };
    match result {
        Ok(()) => {
            decision.status = DecisionStatus::Applied;
            decision.applied_at_ms = Some(now_ms);
            Ok(())
        }
        Err(e) => {
            decision.status = DecisionStatus::Failed;
            decision.failure = Some(e.to_string());
            Err(e.into())
        }
    }
}

/// Restores the defaults the decision overrode. A flow already removed by
/// its hard timeout counts as reverted.
pub fn revert(decision: &mut LoadBalanceDecision, net: &mut SimNetwork, now_ms: u64) -> Result<(), ActionError> {
    decision.guard(DecisionStatus::Applied, "revert")?;
    match &decision.rendered {
        Rendered::RouteMap(ds) => {
            for d in ds {
                net.apply_route_map(&clear(d))?;
            }
        }
        Rendered::Flows(fs) => {
            for f in fs {
                match net.remove_flow(&f.switch_id, f.cookie) {
                    Ok(_) => {}
                    Err(SimError::UnknownCookie { .. }) if f.hard_timeout_s.is_some() => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    decision.status = DecisionStatus::Reverted;
    decision.reverted_at_ms = Some(now_ms);
    Ok(())
}

/// Pending reverts ordered by due time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevertScheduler {
    due: BTreeSet<(u64, String)>,
}

impl RevertScheduler {
    pub fn schedule(&mut self, due_ms: u64, id: &str) {
        self.due.insert((due_ms, id.to_string()));
    }

    pub fn cancel(&mut self, id: &str) -> bool {
        let before = self.due.len();
        self.due.retain(|(_, i)| i != id);
        before != self.due.len()
    }

    /// Removes and returns every entry due at or before `now_ms`.
    pub fn take_due(&mut self, now_ms: u64) -> Vec<String> {
        let later = self.due.split_off(&(now_ms + 1, String::new()));
        std::mem::replace(&mut self.due, later)
            .into_iter()
            .map(|(_, id)| id)
            .collect()
    }

    pub fn next_due_ms(&self) -> Option<u64> {
        self.due.first().map(|(t, _)| *t)
    }

    pub fn len(&self) -> usize {
        self.due.len()
    }

    pub fn is_empty(&self) -> bool {
        self.due.is_empty()
    }
}

/// Owns every decision and the revert schedule. Each mutating call returns
/// a snapshot of the decision after every status transition it made.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Actioner {
    pub cfg: ActionerConfig,
    decisions: Vec<LoadBalanceDecision>,
    scheduler: RevertScheduler,
    next_seq: u64,
}

impl Actioner {
    pub fn new(cfg: ActionerConfig) -> Self {
        Actioner {
            cfg,
            ..Default::default()
        }
    }

    pub fn decisions(&self) -> &[LoadBalanceDecision] {
        &self.decisions
    }

    pub fn decision(&self, id: &str) -> Option<&LoadBalanceDecision> {
        self.decisions.iter().find(|d| d.id == id)
    }

    pub fn scheduler(&self) -> &RevertScheduler {
        &self.scheduler
    }

    fn index(&self, id: &str) -> Result<usize, ActionError> {
        self.decisions
            .iter()
            .position(|d| d.id == id)
            .ok_or_else(|| ActionError::UnknownDecision(id.to_string()))
    }

    fn conflicts(&self, link: &Hop, from: Option<&Hop>, prefix: Option<Ipv4Net>) -> bool {
        self.decisions.iter().any(|d| {
            d.is_live()
                && d.affected_prefix == prefix
                && (d.congested == *link
                    || (from.is_some() && d.steer_from.as_ref().map(|h| &h.device) == from.map(|h| &h.device)))
        })
    }

    /// Reacts to a trend transition on the monitored link `congested`.
    pub fn on_trend(
        &mut self,
        transition: &TrendTransition,
        congested: &Hop,
        net: &mut SimNetwork,
        loads: &PeriodLoads,
        sample_period_ms: u64,
        now_ms: u64,
    ) -> Vec<LoadBalanceDecision> {
        let TrendTransition::Confirmed(event) = transition else {
            return Vec::new();
        };
        let Some(mut decision) = self.plan(event, congested, net, loads, sample_period_ms, now_ms) else {
            return Vec::new();
        };
        let mut out = vec![decision.clone()];
        if decision.status == DecisionStatus::Planned && self.cfg.policy == Policy::Auto {
            let _ = execute(&mut decision, net, now_ms);
            out.push(decision.clone());
            if let Some(due) = decision.revert_due_ms() {
                self.scheduler.schedule(due, &decision.id);
            }
        }
        self.decisions.push(decision);
        out
    }

    fn plan(
        &mut self,
        event: &TrendEvent,
        congested: &Hop,
        net: &SimNetwork,
        loads: &PeriodLoads,
        sample_period_ms: u64,
        now_ms: u64,
    ) -> Option<LoadBalanceDecision> {
        let view = LoadView { net, loads };
        let duration_ms = u64::from(self.cfg.duration_periods) * sample_period_ms;
        let dominant = loads.dominant_prefix(congested);
        let prefix = dominant.map(|(p, _)| p);
        let from = dominant.and_then(|(p, path)| steering_hop(&view, path, congested, p));
        if self.conflicts(congested, from.as_ref(), prefix) {
            return None;
        }
        self.next_seq += 1;
        let seq = self.next_seq;
        let domain_of = |dev: &str| match view.device_kind(dev) {
            Some(DeviceKind::SdnSwitch) => Domain::Sdn,
            _ => Domain::Traditional,
        };
        let mut decision = LoadBalanceDecision {
            id: format!("d-{seq}"),
            trend_event_id: event.id.clone(),
            domain: domain_of(from.as_ref().unwrap_or(congested).device.as_str()),
            affected_prefix: prefix,
            congested: congested.clone(),
            steer_from: from.clone(),
            alternate: None,
            rendered: Rendered::RouteMap(Vec::new()),
            created_at_ms: now_ms,
            applied_at_ms: None,
            duration_ms,
            reverted_at_ms: None,
            status: DecisionStatus::Planned,
            failure: None,
        };
        let planned = (|| {
            let prefix = prefix.ok_or_else(|| ActionError::NoAffectedPrefix {
                device: congested.device.clone(),
                egress: congested.egress.clone(),
            })?;
            let from = from.as_ref().ok_or_else(|| ActionError::NoAlternatePath {
                device: congested.device.clone(),
                prefix,
            })?;
            let alt = choose_alternate(&view, from, prefix)?;
            let rendered = match decision.domain {
                Domain::Traditional => Rendered::RouteMap(plan_traditional(prefix, from, &alt, &self.cfg)),
                Domain::Sdn => Rendered::Flows(plan_sdn(
                    prefix,
                    &alt,
                    &self.cfg,
                    duration_ms,
                    DECISION_COOKIE_BASE + seq,
                )),
            };
            Ok::<_, ActionError>((alt, rendered))
        })();
        match planned {
            Ok((alt, rendered)) => {
                decision.alternate = Some(alt);
                decision.rendered = rendered;
            }
            Err(e) => {
                decision.status = DecisionStatus::Failed;
                decision.failure = Some(e.to_string());
            }
        }
        Some(decision)
    }

    /// Executes a planned decision (manual policy).
    pub fn approve(&mut self, id: &str, net: &mut SimNetwork, now_ms: u64) -> Result<LoadBalanceDecision, ActionError> {
        let i = self.index(id)?;
        let d = &mut self.decisions[i];
        d.guard(DecisionStatus::Planned, "approve")?;
        let res = execute(d, net, now_ms);
        if let Some(due) = d.revert_due_ms() {
            self.scheduler.schedule(due, id);
        }
        match res {
            Err(ActionError::Control(_)) | Ok(()) => Ok(d.clone()),
            Err(e) => Err(e),
        }
    }

    /// Reverts an applied decision now, cancelling its scheduled revert.
    pub fn revert(&mut self, id: &str, net: &mut SimNetwork, now_ms: u64) -> Result<LoadBalanceDecision, ActionError> {
        let i = self.index(id)?;
        revert(&mut self.decisions[i], net, now_ms)?;
        self.scheduler.cancel(id);
        Ok(self.decisions[i].clone())
    }

    /// Fires every scheduled revert due at or before `now_ms`.
    pub fn process_due(&mut self, net: &mut SimNetwork, now_ms: u64) -> Vec<LoadBalanceDecision> {
        let mut out = Vec::new();
        for id in self.scheduler.take_due(now_ms) {
            if let Ok(i) = self.index(&id) {
                let d = &mut self.decisions[i];
                match revert(d, net, now_ms) {
                    Ok(()) => out.push(d.clone()),
                    Err(e) => {
                        d.status = DecisionStatus::Failed;
                        d.failure = Some(format!("revert: {e}"));
                        out.push(d.clone());
                    }
                }
            }
        }
        out
    }
}
