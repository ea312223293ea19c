use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use super::topology::TopologySpec;
use super::SimError;

/// Business hours used by the demo profile: 08:00 through 16:59.
pub const BUSINESS_HOURS: std::ops::Range<u8> = 8..17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demand {
    pub src_prefix: Ipv4Net,
    pub dst_prefix: Ipv4Net,
    pub hourly_mean_bps: Vec<f64>,
    #[serde(default)]
    pub noise_sigma_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficProfile {
    pub demands: Vec<Demand>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl TrafficProfile {
    pub fn validate(&self, topo: &TopologySpec) -> Result<(), SimError> {
        for d in &self.demands {
            if d.hourly_mean_bps.len() != 24 {
                return Err(SimError::BadProfile(format!(
                    "demand {} -> {} has {} hourly means, expected 24",
                    d.src_prefix,
                    d.dst_prefix,
                    d.hourly_mean_bps.len()
                )));
            }
            if d
                .hourly_mean_bps
                .iter()
                .any(|v| !v.is_finite() || *v < 0.0)
            {
                return Err(SimError::BadProfile(format!(
                    "demand {} -> {} has a negative or non-finite hourly mean",
                    d.src_prefix, d.dst_prefix
                )));
            }
            if !d.noise_sigma_bps.is_finite() || d.noise_sigma_bps < 0.0 {
                return Err(SimError::BadProfile(format!(
                    "demand {} -> {} has a negative noise sigma",
                    d.src_prefix, d.dst_prefix
                )));
            }
            for p in [d.src_prefix, d.dst_prefix] {
                if !topo.subnets.contains_key(&p) {
                    return Err(SimError::UnknownPrefix(p));
                }
            }
        }
        Ok(())
    }

    /// Diurnal profile: `business` fraction of `capacity_bps` during business
    /// hours, `off` fraction otherwise, Gaussian noise of `noise` fraction.
    pub fn diurnal(
        pairs: &[(Ipv4Net, Ipv4Net)],
        capacity_bps: u64,
        business: f64,
        off: f64,
        noise: f64,
        seed: u64,
    ) -> Self {
        let cap = capacity_bps as f64;
        let hourly: Vec<f64> = (0..24u8)
            .map(|h| {
                if BUSINESS_HOURS.contains(&h) {
                    business * cap
                } else {
                    off * cap
                }
            })
            .collect();
        TrafficProfile {
            demands: pairs
                .iter()
                .map(|&(src, dst)| Demand {
                    src_prefix: src,
                    dst_prefix: dst,
                    hourly_mean_bps: hourly.clone(),
                    noise_sigma_bps: noise * cap,
                })
                .collect(),
            rng_seed: seed,
        }
    }

    /// Default demo profile for [`TopologySpec::hybrid_demo`]: 60% of the 8 Mbps
    /// bottleneck in business hours, 10% otherwise, noise sigma 5%.
    pub fn demo_default() -> Self {
        let p = |s: &str| s.parse::<Ipv4Net>().expect("static prefix");
        Self::diurnal(
            &[
                (p("10.0.1.0/24"), p("10.0.3.0/24")),
                (p("10.1.1.0/24"), p("10.1.3.0/24")),
            ],
            8_000_000,
            0.60,
            0.10,
            0.05,
            7,
        )
    }

    pub fn without_noise(mut self) -> Self {
        for d in &mut self.demands {
            d.noise_sigma_bps = 0.0;
        }
        self
    }
}

/// Temporary multiplier on one demand's offered load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub src_prefix: Ipv4Net,
    pub dst_prefix: Ipv4Net,
    pub factor: f64,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl Injection {
    pub fn active_at(&self, now_ms: u64) -> bool {
        (self.start_ms..self.end_ms).contains(&now_ms)
    }
}
