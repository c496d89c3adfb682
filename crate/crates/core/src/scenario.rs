//! Scenario files: JSON, unknown keys rejected, every field defaulted.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelParams, PhyParams};
use crate::cla::ClaParams;
use crate::gcp::GcpConfig;
use crate::mac::{BasicPcParams, MacTimings};
use crate::node::{EnergyConfig, MobilitySpec, Position, TrafficSpec};
use crate::units::watts_to_dbm;
use crate::NodeId;

/// Upper bound on simulated time accepted by validation.
pub const MAX_SIM_TIME_S: f64 = 100_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Dcf,
    BasicPc,
    ClaAmac,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Dcf, Protocol::BasicPc, Protocol::ClaAmac];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Dcf => "dcf",
            Protocol::BasicPc => "basic-pc",
            Protocol::ClaAmac => "cla-amac",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "dcf" => Ok(Protocol::Dcf),
            "basic-pc" => Ok(Protocol::BasicPc),
            "cla-amac" => Ok(Protocol::ClaAmac),
            other => Err(format!("unknown protocol `{other}` (expected dcf, basic-pc or cla-amac)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// Uniform over the area. Without a fixed seed the run seed is used, so
    /// every run gets its own topology.
    Random {
        #[serde(default)]
        seed: Option<u64>,
    },
    Explicit {
        positions: Vec<Position>,
    },
}

impl Default for Placement {
    fn default() -> Self {
        Placement::Random { seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrafficConfig {
    /// Every node runs one CBR flow to its nearest neighbour.
    NearestNeighbor {
        payload_bytes: u32,
        interval_s: f64,
        /// First emission drawn uniformly from `[0, interval)` per flow.
        jitter_start: bool,
    },
    Flows {
        flows: Vec<TrafficSpec>,
    },
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig::NearestNeighbor { payload_bytes: 2048, interval_s: 0.025, jitter_start: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub name: String,
    pub node_count: u32,
    pub area_m: [f64; 2],
    pub placement: Placement,
    pub channel: ChannelParams,
    pub phy: PhyParams,
    pub mac: MacTimings,
    pub cla: ClaParams,
    pub basic_pc: BasicPcParams,
    pub energy: EnergyConfig,
    pub traffic: TrafficConfig,
    pub mobility: MobilitySpec,
    pub gcp: GcpConfig,
    pub routing_epoch_s: f64,
    pub kb_snapshot_period_s: f64,
    pub sim_time_s: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "default".into(),
            node_count: 50,
            area_m: [1000.0, 1000.0],
            placement: Placement::default(),
            channel: ChannelParams::default(),
            phy: PhyParams::default(),
            mac: MacTimings::default(),
            cla: ClaParams::default(),
            basic_pc: BasicPcParams::default(),
            energy: EnergyConfig::default(),
            traffic: TrafficConfig::default(),
            mobility: MobilitySpec::Static,
            gcp: GcpConfig::default(),
            routing_epoch_s: 1.0,
            kb_snapshot_period_s: 1.0,
            sim_time_s: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        Scenario::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// SHA-256 over the canonical JSON of every effective parameter.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn pt_max_dbm(&self) -> f64 {
        watts_to_dbm(self.energy.pt_max_w)
    }

    pub fn pt_min_dbm(&self) -> f64 {
        watts_to_dbm(self.energy.pt_min_w)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        let mut err = |field: &str, message: String| errs.push(FieldError { field: field.into(), message });
        let n = self.node_count;
        if n < 2 {
            err("node_count", format!("need at least 2 nodes, got {n}"));
        }
        if !(self.area_m[0] > 0.0 && self.area_m[1] > 0.0) {
            err("area_m", "both dimensions must be > 0".into());
        }
        if let Placement::Explicit { positions } = &self.placement {
            if positions.len() != n as usize {
                err("placement.positions", format!("{} positions for {n} nodes", positions.len()));
            }
            for (i, p) in positions.iter().enumerate() {
                if !(0.0..=self.area_m[0]).contains(&p.x) || !(0.0..=self.area_m[1]).contains(&p.y) {
                    err(&format!("placement.positions[{i}]"), "outside the area".into());
                }
            }
        }
        for (field, r) in [
            ("channel", self.channel.validate()),
            ("mac", self.mac.validate()),
            ("cla", self.cla.validate()),
            ("energy", self.energy.validate()),
            ("gcp", self.gcp.validate()),
        ] {
            if let Err(m) = r {
                err(field, m);
            }
        }
        match &self.traffic {
            TrafficConfig::NearestNeighbor { payload_bytes, interval_s, .. } => {
                if *payload_bytes == 0 {
                    err("traffic.payload_bytes", "must be > 0".into());
                }
                if !(*interval_s > 0.0) {
                    err("traffic.interval_s", "must be > 0".into());
                }
            }
            TrafficConfig::Flows { flows } => {
                for (i, f) in flows.iter().enumerate() {
                    let at = |k: &str| format!("traffic.flows[{i}].{k}");
                    if f.src.0 >= n || f.dst.0 >= n {
                        err(&at("src"), format!("node ids must be < {n}"));
                    }
                    if f.src == f.dst {
                        err(&at("dst"), "src and dst must differ".into());
                    }
                    if !(f.interval_s > 0.0) {
                        err(&at("interval_s"), "must be > 0".into());
                    }
                    if f.payload_bytes == 0 {
                        err(&at("payload_bytes"), "must be > 0".into());
                    }
                    if !(f.start_s >= 0.0) {
                        err(&at("start_s"), "must be >= 0".into());
                    }
                }
            }
        }
        if let MobilitySpec::RandomWaypoint { min_speed_mps, max_speed_mps, update_s } = self.mobility {
            if !(min_speed_mps >= 0.0 && min_speed_mps <= max_speed_mps) {
                err("mobility", "require 0 <= min_speed_mps <= max_speed_mps".into());
            }
            if !(update_s > 0.0) {
                err("mobility.update_s", "must be > 0".into());
            }
        }
        if !(self.routing_epoch_s > 0.0) {
            err("routing_epoch_s", "must be > 0".into());
        }
        if !(self.kb_snapshot_period_s > 0.0) {
            err("kb_snapshot_period_s", "must be > 0".into());
        }
        if !(self.sim_time_s > 0.0 && self.sim_time_s <= MAX_SIM_TIME_S) {
            err("sim_time_s", format!("must lie in (0, {MAX_SIM_TIME_S}]"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errs))
        }
    }

    /// Traffic flows after expanding patterns against the placed positions.
    pub fn flows(&self, positions: &[Position]) -> Vec<TrafficSpec> {
        match &self.traffic {
            TrafficConfig::Flows { flows } => flows.clone(),
            TrafficConfig::NearestNeighbor { payload_bytes, interval_s, .. } => (0..positions.len())
                .map(|s| {
                    let dst = (0..positions.len())
                        .filter(|&d| d != s)
                        .min_by(|&a, &b| {
                            positions[s].distance(positions[a]).total_cmp(&positions[s].distance(positions[b]))
                        })
                        .expect("at least two nodes");
                    TrafficSpec {
                        src: NodeId(s as u32),
                        dst: NodeId(dst as u32),
                        payload_bytes: *payload_bytes,
                        interval_s: *interval_s,
                        start_s: 0.0,
                        stop_s: None,
                        realtime: false,
                    }
                })
                .collect(),
        }
    }

    pub fn jitter_start(&self) -> bool {
        matches!(self.traffic, TrafficConfig::NearestNeighbor { jitter_start: true, .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_names() {
        for p in Protocol::ALL {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.as_str()));
        }
        assert_eq!("CLA_AMAC".parse::<Protocol>().unwrap(), Protocol::ClaAmac);
        assert!("tdma".parse::<Protocol>().is_err());
    }

    #[test]
    fn round_trip_keeps_hash() {
        let s = Scenario::default();
        let back = Scenario::from_json(&s.to_json_pretty()).unwrap();
        assert_eq!(back.hash(), s.hash());
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = Scenario::from_json(r#"{"node_count": 5, "bogus": 1}"#).unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(_)), "{err}");
    }

    #[test]
    fn field_diagnostics() {
        let json = r#"{
            "node_count": 3,
            "traffic": {"pattern": "flows", "flows": [{"src": 0, "dst": 7, "payload_bytes": 10, "interval_s": 0.1, "start_s": 0}]},
            "sim_time_s": -1
        }"#;
        let ScenarioError::Invalid(errs) = Scenario::from_json(json).unwrap_err() else { panic!() };
        let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"traffic.flows[0].src"), "{fields:?}");
        assert!(fields.contains(&"sim_time_s"), "{fields:?}");
    }

    #[test]
    fn power_presets() {
        let s = Scenario::default();
        assert!((s.pt_max_dbm() - 23.0295).abs() < 1e-3);
        assert!((s.pt_min_dbm() - 10.0311).abs() < 1e-3);
    }

    #[test]
    fn nearest_neighbour_flows() {
        let s = Scenario { node_count: 3, ..Scenario::default() };
        let pos = [Position::new(0.0, 0.0), Position::new(10.0, 0.0), Position::new(25.0, 0.0)];
        let f = s.flows(&pos);
        let pairs: Vec<_> = f.iter().map(|f| (f.src.0, f.dst.0)).collect();
        assert_eq!(pairs, [(0, 1), (1, 0), (2, 1)]);
    }
}
