//! Deterministic discrete-event simulator for ad hoc wireless networks.
//!
//! Three medium-access protocols share one event-driven node stack:
//! IEEE 802.11 DCF, a blind up/down power-control baseline, and CLA-AMAC,
//! a cross-layer scheme that adapts contention-window bounds from a per-node
//! knowledge base and steers transmit power by classifying ACK failures
//! against measured interference.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernel`] and [`rng`]: event queue, clock and seeded streams.
//! * [`channel`]: path loss, shadowing, SINR, capture and carrier sense.
//! * [`mac`]: the DCF state machine and the per-protocol access policies.
//! * [`cla`]: contention-window ladder, collision predictor, power control.
//! * [`gcp`]: out-of-band control-plane reports.
//! * [`node`]: traffic, mobility, energy and routing.
//! * [`scenario`], [`sim`], [`metrics`], [`harness`]: configuration, the
//!   simulation world, metric extraction and batch orchestration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod channel;
pub mod cla;
pub mod gcp;
pub mod harness;
pub mod kernel;
pub mod mac;
pub mod metrics;
pub mod node;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod units;

pub use channel::{ChannelParams, ReceptionOutcome};
pub use harness::{aggregate, gain_percent, run_scenario, RunResult, Summary};
pub use kernel::{EventId, Kernel, SimTime};
pub use mac::{Frame, FrameKind};
pub use scenario::{Protocol, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const BROADCAST: NodeId = NodeId(u32::MAX - 1);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_broadcast(self) -> bool {
        self == NodeId::BROADCAST
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_broadcast() {
            f.write_str("*")
        } else {
            write!(f, "{}", self.0)
        }
    }
}
