//! The single JSON configuration document and its validation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::actioner::ActionerConfig;
use crate::analytics::AnalyticsConfig;
use crate::collector::{PollSchedule, Source};
use crate::netsim::{Endpoint, TopologySpec, TrafficProfile, DEFAULT_EPOCH_MS};
use crate::pipeline::{default_topics, Metric, MetricAllowList};

/// One failed configuration constraint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub key: String,
    pub message: String,
}

impl Violation {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {}", list(.0))]
    Validation(Vec<Violation>),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub epoch_ms: u64,
    /// Virtual seconds per wall second when the service free-runs.
    pub acceleration: f64,
    /// Simulation step; defaults to the poll period.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tick_ms: Option<u64>,
    /// Advance virtual time on a wall-clock timer in the service.
    pub free_run: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            epoch_ms: DEFAULT_EPOCH_MS,
            acceleration: 3600.0,
            tick_ms: None,
            free_run: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub allow_list: MetricAllowList,
    pub topics: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            allow_list: MetricAllowList::default(),
            topics: default_topics(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub port: u16,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            port: 8080,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub topology: TopologySpec,
    pub traffic: TrafficProfile,
    pub sim: SimConfig,
    pub poll: PollSchedule,
    pub pipeline: PipelineConfig,
    pub analytics: AnalyticsConfig,
    pub actioner: ActionerConfig,
    /// Links to benchmark and watch. Defaults to every inter-device egress on
    /// a demand's baseline path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monitored_links: Option<Vec<Endpoint>>,
    pub server: ServerConfig,
    pub data_dir: PathBuf,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            topology: TopologySpec::hybrid_demo(),
            traffic: TrafficProfile::demo_default(),
            sim: SimConfig::default(),
            poll: PollSchedule::default(),
            pipeline: PipelineConfig::default(),
            analytics: AnalyticsConfig::default(),
            actioner: ActionerConfig::default(),
            monitored_links: None,
            server: ServerConfig::default(),
            data_dir: PathBuf::from("trendnet-data"),
        }
    }
}

/// Top-level keys that may change while the system runs.
pub const RUNTIME_KEYS: [&str; 2] = ["analytics", "actioner"];

impl SystemConfig {
    /// Parses a document, filling defaults. Blank input is the empty document.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        let cfg: SystemConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validated()
    }

    pub fn validated(self) -> Result<Self, ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Validation(v))
        }
    }

    pub fn tick_ms(&self) -> u64 {
        self.sim.tick_ms.unwrap_or(self.poll.period_ms)
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let topo_ok = match self.topology.validate() {
            Ok(()) => true,
            Err(e) => {
                v.push(Violation::new("topology", e.to_string()));
                false
            }
        };
        if topo_ok {
            if let Err(e) = self.traffic.validate(&self.topology) {
                v.push(Violation::new("traffic", e.to_string()));
            }
        }
        if self.sim.tick_ms == Some(0) {
            v.push(Violation::new("sim.tick_ms", "must be positive"));
        }
        if !(self.sim.acceleration > 0.0 && self.sim.acceleration.is_finite()) {
            v.push(Violation::new("sim.acceleration", "must be positive"));
        }
        if self.poll.period_ms == 0 {
            v.push(Violation::new("poll.period_ms", "must be positive"));
        }
        if self.poll.jitter_ms >= self.poll.period_ms.max(1) {
            v.push(Violation::new("poll.jitter_ms", "must be less than poll.period_ms"));
        }
        if !self.pipeline.allow_list.contains(Metric::OutOctets) {
            v.push(Violation::new("pipeline.allow_list", "must include outOctets"));
        }
        let topics: BTreeSet<&str> = self.pipeline.topics.iter().map(String::as_str).collect();
        if topics.len() != self.pipeline.topics.len() || topics.contains("") {
            v.push(Violation::new("pipeline.topics", "must be distinct non-empty names"));
        }
        for s in [Source::Collectd, Source::Sdn] {
            if !topics.contains(s.as_str()) {
                v.push(Violation::new("pipeline.topics", format!("must include {s}")));
            }
        }
        v.extend(self.analytics.violations("analytics."));
        if self.analytics.sample_period_ms != self.poll.period_ms {
            v.push(Violation::new("analytics.sample_period_ms", "must equal poll.period_ms"));
        }
        v.extend(self.actioner.violations("actioner."));
        if let (true, Some(links)) = (topo_ok, &self.monitored_links) {
            for (i, l) in links.iter().enumerate() {
                if !self.topology.has_interface(l) {
                    v.push(Violation::new(
                        format!("monitored_links[{i}]"),
                        format!("no interface {} on {}", l.interface, l.device),
                    ));
                }
            }
        }
        if self.data_dir.as_os_str().is_empty() {
            v.push(Violation::new("data_dir", "must not be empty"));
        }
        v
    }

    /// Applies a JSON merge patch limited to [`RUNTIME_KEYS`].
    pub fn patched(&self, patch: &Value) -> Result<SystemConfig, ConfigError> {
        let Value::Object(map) = patch else {
            return Err(ConfigError::Parse("config patch must be an object".into()));
        };
        let structural: Vec<Violation> = map
            .keys()
            .filter(|k| !RUNTIME_KEYS.contains(&k.as_str()))
            .map(|k| Violation::new(k.clone(), "cannot change while running"))
            .collect();
        if !structural.is_empty() {
            return Err(ConfigError::Validation(structural));
        }
        let mut doc = serde_json::to_value(self).expect("config serializes");
        merge_patch(&mut doc, patch);
        let cfg: SystemConfig = serde_json::from_value(doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validated()
    }
}

/// JSON merge patch: objects merge recursively, `null` deletes, anything
/// else replaces.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    let Value::Object(p) = patch else {
        *target = patch.clone();
        return;
    };
    if !target.is_object() {
        *target = Value::Object(Default::default());
    }
    let t = target.as_object_mut().expect("object");
    for (k, v) in p {
        if v.is_null() {
            t.remove(k);
        } else {
            merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
        }
    }
}
