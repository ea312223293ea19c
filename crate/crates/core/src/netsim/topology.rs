use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use super::SimError;

/// Default edge-port capacity for subnet attachments (FastEthernet).
pub const DEFAULT_EDGE_CAPACITY_BPS: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceKind {
    Traditional,
    SdnSwitch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    pub kind: DeviceKind,
    pub mgmt_ip: Ipv4Addr,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub device: String,
    pub interface: String,
}

impl Endpoint {
    pub fn new(device: impl Into<String>, interface: impl Into<String>) -> Self {
        Self {
            device: device.into(),
            interface: interface.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub endpoint_a: Endpoint,
    pub endpoint_b: Endpoint,
    pub capacity_bps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetAttachment {
    pub device: String,
    pub interface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_bps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub subnets: BTreeMap<Ipv4Net, SubnetAttachment>,
}

impl TopologySpec {
    /// Checks the structural invariants, returning the first violation.
    pub fn validate(&self) -> Result<(), SimError> {
        let mut ids = BTreeSet::new();
        for d in &self.devices {
            if !ids.insert(d.id.as_str()) {
                return Err(SimError::DuplicateDeviceId(d.id.clone()));
            }
        }
        let mut used: BTreeSet<(&str, &str)> = BTreeSet::new();
        for link in &self.links {
            for ep in [&link.endpoint_a, &link.endpoint_b] {
                if !ids.contains(ep.device.as_str()) {
                    return Err(SimError::DanglingEndpoint(ep.device.clone()));
                }
                if !used.insert((ep.device.as_str(), ep.interface.as_str())) {
                    return Err(SimError::InterfaceInUse {
                        device: ep.device.clone(),
                        interface: ep.interface.clone(),
                    });
                }
            }
            if link.endpoint_a.device == link.endpoint_b.device {
                return Err(SimError::SelfLoop(link.endpoint_a.device.clone()));
            }
            if link.capacity_bps == 0 {
                return Err(SimError::NonPositiveCapacity);
            }
        }
        for (prefix, att) in &self.subnets {
            if !ids.contains(att.device.as_str()) {
                return Err(SimError::SubnetUnattached(*prefix));
            }
            if att.capacity_bps == Some(0) {
                return Err(SimError::NonPositiveCapacity);
            }
            if !used.insert((att.device.as_str(), att.interface.as_str())) {
                return Err(SimError::InterfaceInUse {
                    device: att.device.clone(),
                    interface: att.interface.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn device(&self, id: &str) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| d.id == id)
    }

    /// Whether `ep` names a link endpoint or subnet attachment.
    pub fn has_interface(&self, ep: &Endpoint) -> bool {
        self.links
            .iter()
            .any(|l| l.endpoint_a == *ep || l.endpoint_b == *ep)
            || self
                .subnets
                .values()
                .any(|a| a.device == ep.device && a.interface == ep.interface)
    }

    /// Hybrid demo network: a four-router ring and a four-switch ring, each
    /// with two equal-length disjoint paths between its two edge subnets.
    pub fn hybrid_demo() -> Self {
        const CORE_BPS: u64 = 8_000_000;
        let dev = |id: &str, kind, ip: [u8; 4]| DeviceSpec {
            id: id.to_string(),
            kind,
            mgmt_ip: Ipv4Addr::from(ip),
        };
        let link = |a: (&str, &str), b: (&str, &str)| LinkSpec {
            endpoint_a: Endpoint::new(a.0, a.1),
            endpoint_b: Endpoint::new(b.0, b.1),
            capacity_bps: CORE_BPS,
        };
        let att = |d: &str, i: &str| SubnetAttachment {
            device: d.to_string(),
            interface: i.to_string(),
            capacity_bps: None,
        };
        let fa0 = "FastEthernet0_0";
        let fa1 = "FastEthernet0_1";
        let edge = "FastEthernet1_0";
        TopologySpec {
            devices: vec![
                dev("R1", DeviceKind::Traditional, [10, 0, 0, 10]),
                dev("R2", DeviceKind::Traditional, [10, 0, 0, 11]),
                dev("R3", DeviceKind::Traditional, [10, 0, 0, 12]),
                dev("R4", DeviceKind::Traditional, [10, 0, 0, 13]),
                dev("S1", DeviceKind::SdnSwitch, [10, 0, 0, 20]),
                dev("S2", DeviceKind::SdnSwitch, [10, 0, 0, 21]),
                dev("S3", DeviceKind::SdnSwitch, [10, 0, 0, 22]),
                dev("S4", DeviceKind::SdnSwitch, [10, 0, 0, 23]),
            ],
            links: vec![
                link(("R1", fa0), ("R2", fa0)),
                link(("R2", fa1), ("R3", fa0)),
                link(("R1", fa1), ("R4", fa0)),
                link(("R4", fa1), ("R3", fa1)),
                link(("S1", "eth1"), ("S2", "eth1")),
                link(("S2", "eth2"), ("S3", "eth1")),
                link(("S1", "eth2"), ("S4", "eth1")),
                link(("S4", "eth2"), ("S3", "eth2")),
            ],
            subnets: [
                ("10.0.1.0/24", att("R1", edge)),
                ("10.0.3.0/24", att("R3", edge)),
                ("10.1.1.0/24", att("S1", "eth3")),
                ("10.1.3.0/24", att("S3", "eth3")),
            ]
            .into_iter()
            .map(|(p, a)| (p.parse().expect("static prefix"), a))
            .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_topology_is_valid() {
        TopologySpec::hybrid_demo().validate().unwrap();
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut t = TopologySpec::hybrid_demo();
        t.devices.push(t.devices[0].clone());
        assert_eq!(t.validate(), Err(SimError::DuplicateDeviceId("R1".into())));
    }

    #[test]
    fn dangling_endpoint_rejected() {
        let mut t = TopologySpec::hybrid_demo();
        t.links[0].endpoint_b.device = "R9".into();
        assert_eq!(t.validate(), Err(SimError::DanglingEndpoint("R9".into())));
    }

    #[test]
    fn zero_capacity_rejected() {
        let mut t = TopologySpec::hybrid_demo();
        t.links[2].capacity_bps = 0;
        assert_eq!(t.validate(), Err(SimError::NonPositiveCapacity));
    }

    #[test]
    fn subnet_on_missing_device_rejected() {
        let mut t = TopologySpec::hybrid_demo();
        let p: Ipv4Net = "192.168.0.0/24".parse().unwrap();
        t.subnets.insert(
            p,
            SubnetAttachment {
                device: "nope".into(),
                interface: "x".into(),
                capacity_bps: None,
            },
        );
        assert_eq!(t.validate(), Err(SimError::SubnetUnattached(p)));
    }

    #[test]
    fn topology_json_shape() {
        let t = TopologySpec::hybrid_demo();
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["devices"][4]["kind"], "sdn-switch");
        assert_eq!(v["subnets"]["10.0.1.0/24"]["device"], "R1");
        let back: TopologySpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
    }
}
