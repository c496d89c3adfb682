//! Run-level metrics computed from the raw run log.

use serde::{Deserialize, Serialize};

use crate::kernel::SimTime;
use crate::NodeId;

/// Received payload bits per second, in Mb/s.
pub fn throughput_mbps(total_payload_bits: u64, sim_time_s: f64) -> f64 {
    total_payload_bits as f64 / sim_time_s / 1e6
}

pub fn mean_delay_s(delays_s: &[f64]) -> Option<f64> {
    (!delays_s.is_empty()).then(|| delays_s.iter().sum::<f64>() / delays_s.len() as f64)
}

/// One end-to-end DATA delivery at its final destination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub packet: u64,
    pub at: SimTime,
    pub created_at: SimTime,
    pub payload_bytes: u32,
}

impl Delivery {
    pub fn delay_s(&self) -> f64 {
        (self.at - self.created_at).as_secs_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Death {
    pub node: NodeId,
    pub at: SimTime,
    /// Whether the node had transmitted or received before dying.
    pub active: bool,
    /// Traffic pairs with both ends alive and a route between them, after this death.
    pub viable_flows: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Lifetimes {
    pub fnd_s: Option<f64>,
    pub lnd_s: Option<f64>,
    pub lifetime_rcvd_s: Option<f64>,
}

/// FND over active nodes only; LND is the death after which no configured
/// pair stays viable; lifetime RCVD is the last final-destination delivery.
pub fn lifetimes(deaths: &[Death], last_delivery: Option<SimTime>) -> Lifetimes {
    let fnd = deaths.iter().filter(|d| d.active).map(|d| d.at).min();
    let lnd = deaths
        .iter()
        .enumerate()
        .find(|(i, d)| d.viable_flows == 0 && deaths[i + 1..].iter().all(|l| l.viable_flows == 0))
        .map(|(_, d)| d.at);
    Lifetimes {
        fnd_s: fnd.map(SimTime::as_secs_f64),
        lnd_s: lnd.map(SimTime::as_secs_f64),
        lifetime_rcvd_s: last_delivery.map(SimTime::as_secs_f64),
    }
}
