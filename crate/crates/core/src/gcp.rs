//! Global control plane: periodic per-node reports of what each node heard,
//! delivered to every other live node over an idealised out-of-band channel
//! with fixed latency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cla::{min_power_to_reach, KnowledgeBase, NeighborEntry};
use crate::kernel::{Kernel, SimTime};
use crate::units::{dbm_to_mw, mw_to_dbm};
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcpScope {
    Network,
    OneHop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcpConfig {
    pub enabled: bool,
    pub period_s: f64,
    pub latency_s: f64,
    pub report_airtime_s: f64,
    pub control_power_w: f64,
    pub scope: GcpScope,
}

impl Default for GcpConfig {
    fn default() -> Self {
        GcpConfig {
            enabled: true,
            period_s: 0.5,
            latency_s: 0.010,
            report_airtime_s: 0.005,
            control_power_w: 0.01,
            scope: GcpScope::Network,
        }
    }
}

impl GcpConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.enabled {
            return Ok(());
        }
        if !(self.latency_s > 0.0) {
            return Err("latency_s must be > 0".into());
        }
        if !(self.period_s > self.latency_s) {
            return Err("period_s must exceed latency_s".into());
        }
        if !(self.report_airtime_s >= 0.0) || !(self.control_power_w >= 0.0) {
            return Err("report_airtime_s and control_power_w must be >= 0".into());
        }
        Ok(())
    }

    pub fn period(&self) -> SimTime {
        SimTime::from_secs_f64(self.period_s)
    }

    pub fn latency(&self) -> SimTime {
        SimTime::from_secs_f64(self.latency_s)
    }

    /// Energy drawn at the origin per report.
    pub fn report_energy_j(&self) -> f64 {
        self.control_power_w * self.report_airtime_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeardEntry {
    pub neighbor: NodeId,
    pub mean_prx_dbm: f64,
    pub neighbor_tx_power_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinrStats {
    pub mean_db: f64,
    pub min_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcpReport {
    pub origin: NodeId,
    pub issued_at: SimTime,
    pub tx_power_dbm: f64,
    pub heard: Vec<HeardEntry>,
    pub sinr_stats: Option<SinrStats>,
    pub slot_util: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct LinkAcc {
    gain_sum: f64,
    count: u64,
    last_tx_dbm: f64,
}

/// What a node decoded during the current report period.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkObservations {
    links: BTreeMap<NodeId, LinkAcc>,
    sinr_sum: f64,
    sinr_min: f64,
    sinr_n: u64,
}

impl LinkObservations {
    /// Accumulates linear path gain. The report rescales it by the latest
    /// announced power.
    pub fn observe(&mut self, src: NodeId, prx_dbm: f64, tx_dbm: f64, sinr_db: f64) {
        let acc = self.links.entry(src).or_default();
        acc.gain_sum += dbm_to_mw(prx_dbm - tx_dbm);
        acc.count += 1;
        acc.last_tx_dbm = tx_dbm;
        if self.sinr_n == 0 || sinr_db < self.sinr_min {
            self.sinr_min = sinr_db;
        }
        self.sinr_sum += sinr_db;
        self.sinr_n += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn clear(&mut self) {
        *self = LinkObservations::default();
    }
}

pub fn build_report(
    origin: NodeId,
    obs: &LinkObservations,
    tx_power_dbm: f64,
    slot_util: f64,
    now: SimTime,
) -> GcpReport {
    let heard = obs
        .links
        .iter()
        .map(|(&neighbor, acc)| HeardEntry {
            neighbor,
            mean_prx_dbm: acc.last_tx_dbm + mw_to_dbm(acc.gain_sum / acc.count as f64),
            neighbor_tx_power_dbm: acc.last_tx_dbm,
        })
        .collect();
    let sinr_stats =
        (obs.sinr_n > 0).then(|| SinrStats { mean_db: obs.sinr_sum / obs.sinr_n as f64, min_db: obs.sinr_min });
    GcpReport { origin, issued_at: now, tx_power_dbm, heard, sinr_stats, slot_util }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishReceipt {
    pub deliveries: usize,
    pub energy_j: f64,
}

/// Schedules one delivery per recipient at `issued_at + latency`. The caller
/// debits `energy_j` from the origin and filters recipients by scope; liveness
/// is checked again on delivery.
pub fn publish<E>(
    report: &GcpReport,
    cfg: &GcpConfig,
    recipients: impl IntoIterator<Item = NodeId>,
    kernel: &mut Kernel<E>,
    mut make_event: impl FnMut(NodeId) -> E,
) -> PublishReceipt {
    let at = report.issued_at + cfg.latency();
    let mut deliveries = 0;
    for node in recipients {
        if node == report.origin {
            continue;
        }
        kernel.schedule(at, make_event(node)).expect("delivery lies in the future");
        deliveries += 1;
    }
    PublishReceipt { deliveries, energy_j: cfg.report_energy_j() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied,
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApplyParams {
    pub ttl: SimTime,
    pub sinr_threshold_db: f64,
    pub noise_floor_dbm: f64,
    pub margin_db: f64,
}

pub fn apply_report(
    kb: &mut KnowledgeBase,
    me: NodeId,
    report: &GcpReport,
    now: SimTime,
    p: &ApplyParams,
) -> ApplyOutcome {
    if report.issued_at + p.ttl < now || kb.applied_reports.get(&report.origin).is_some_and(|&t| t > report.issued_at) {
        kb.stale_reports += 1;
        return ApplyOutcome::Stale;
    }
    kb.applied_reports.insert(report.origin, report.issued_at);
    let entry = kb.neighbor_power_table.entry(report.origin).or_insert(NeighborEntry {
        last_prx_dbm: None,
        their_tx_power_dbm: report.tx_power_dbm,
        min_power_dbm: None,
        updated_at: report.issued_at,
    });
    entry.their_tx_power_dbm = report.tx_power_dbm;
    entry.updated_at = report.issued_at;
    if let Some(h) = report.heard.iter().find(|h| h.neighbor == me) {
        entry.last_prx_dbm = Some(h.mean_prx_dbm);
        entry.min_power_dbm = Some(min_power_to_reach(
            h.mean_prx_dbm,
            h.neighbor_tx_power_dbm,
            p.sinr_threshold_db,
            p.noise_floor_dbm,
            p.margin_db,
        ));
    }
    ApplyOutcome::Applied
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cla::ClaParams;

    fn params() -> ApplyParams {
        ApplyParams { ttl: SimTime::from_secs(5), sinr_threshold_db: 22.05, noise_floor_dbm: -96.0, margin_db: 3.0 }
    }

    #[test]
    fn empty_report() {
        let r = build_report(NodeId(1), &LinkObservations::default(), 20.0, 0.3, SimTime::from_secs(1));
        assert!(r.heard.is_empty());
        assert!(r.sinr_stats.is_none());
        assert_eq!(r.slot_util, 0.3);
    }

    #[test]
    fn mean_prx_is_linear() {
        let mut obs = LinkObservations::default();
        for prx in [-70.0, -72.0, -74.0] {
            obs.observe(NodeId(7), prx, 20.0, 20.0);
        }
        let r = build_report(NodeId(1), &obs, 20.0, 0.0, SimTime::ZERO);
        let oracle = 10.0 * ((10f64.powf(-7.0) + 10f64.powf(-7.2) + 10f64.powf(-7.4)) / 3.0).log10();
        assert!((r.heard[0].mean_prx_dbm - oracle).abs() < 1e-9);
        assert!((r.heard[0].mean_prx_dbm - -71.698).abs() < 1e-3);
        let s = r.sinr_stats.unwrap();
        assert_eq!((s.mean_db, s.min_db), (20.0, 20.0));
    }

    #[derive(Debug)]
    struct Deliver(NodeId);

    impl crate::kernel::Traced for Deliver {
        fn target(&self) -> String {
            self.0.to_string()
        }
        fn kind(&self) -> &'static str {
            "gcp"
        }
    }

    #[test]
    fn publish_schedules_one_per_peer_at_latency() {
        let mut k: Kernel<Deliver> = Kernel::new();
        let cfg = GcpConfig::default();
        let r = build_report(NodeId(3), &LinkObservations::default(), 20.0, 0.0, SimTime::from_millis(500));
        let receipt = publish(&r, &cfg, (0..50).map(NodeId), &mut k, Deliver);
        assert_eq!(receipt.deliveries, 49);
        assert!((receipt.energy_j - 5e-5).abs() < 1e-18);
        let mut times = Vec::new();
        k.run_until(SimTime::from_secs(1), |k, e| {
            times.push((k.now(), e.payload.0));
            Ok::<(), std::convert::Infallible>(())
        })
        .unwrap();
        assert_eq!(times.len(), 49);
        assert!(times.iter().all(|(t, _)| *t == SimTime::from_millis(510)));
        assert!(times.iter().all(|(_, n)| *n != NodeId(3)));
    }

    #[test]
    fn apply_builds_floor_and_is_idempotent() {
        let mut kb = KnowledgeBase::new(&ClaParams::default());
        let report = GcpReport {
            origin: NodeId(4),
            issued_at: SimTime::from_secs(1),
            tx_power_dbm: 17.0,
            heard: vec![HeardEntry { neighbor: NodeId(0), mean_prx_dbm: -70.0, neighbor_tx_power_dbm: 20.0 }],
            sinr_stats: None,
            slot_util: 0.0,
        };
        let now = SimTime::from_millis(1010);
        assert_eq!(apply_report(&mut kb, NodeId(0), &report, now, &params()), ApplyOutcome::Applied);
        let e = kb.neighbor_power_table[&NodeId(4)];
        assert!((e.min_power_dbm.unwrap() - 19.05).abs() < 1e-9);
        assert_eq!(e.their_tx_power_dbm, 17.0);
        let snapshot = kb.clone();
        apply_report(&mut kb, NodeId(0), &report, now, &params());
        assert_eq!(kb, snapshot);

        let mut other = KnowledgeBase::new(&ClaParams::default());
        apply_report(&mut other, NodeId(9), &report, now, &params());
        let e = other.neighbor_power_table[&NodeId(4)];
        assert_eq!((e.min_power_dbm, e.their_tx_power_dbm), (None, 17.0));
    }

    #[test]
    fn stale_and_out_of_order_reports_ignored() {
        let mut kb = KnowledgeBase::new(&ClaParams::default());
        let mut report = GcpReport {
            origin: NodeId(4),
            issued_at: SimTime::from_secs(10),
            tx_power_dbm: 17.0,
            heard: vec![],
            sinr_stats: None,
            slot_util: 0.0,
        };
        assert_eq!(apply_report(&mut kb, NodeId(0), &report, SimTime::from_secs(16), &params()), ApplyOutcome::Stale);
        apply_report(&mut kb, NodeId(0), &report, SimTime::from_secs(11), &params());
        report.issued_at = SimTime::from_secs(9);
        report.tx_power_dbm = 12.0;
        assert_eq!(apply_report(&mut kb, NodeId(0), &report, SimTime::from_secs(11), &params()), ApplyOutcome::Stale);
        assert_eq!(kb.neighbor_power_table[&NodeId(4)].their_tx_power_dbm, 17.0);
        assert_eq!(kb.stale_reports, 2);
    }
}
