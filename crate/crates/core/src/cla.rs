//! CLA-AMAC: contention-window bounds that move with the retry stage and the
//! estimated neighbourhood size, a knowledge base that predicts collisions
//! from recent history, and transmit power control driven by how noisy the
//! vicinity looked when an ACK went missing.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::kernel::SimTime;
use crate::mac::{AccessPolicy, CwRange, PowerBounds, RxInfo};
use crate::scenario::Protocol;
use crate::units::{linear_mean_dbm, mw_to_dbm};
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaParams {
    pub n_ref: u32,
    pub horizon_s: f64,
    pub slot_window: usize,
    pub alpha: f64,
    pub ttl_s: f64,
    pub streak_min: u32,
    pub delta_down_db: f64,
    pub margin_db: f64,
    /// Added to the noise floor to get eta_low.
    pub eta_low_offset_db: f64,
    /// Added to the noise floor to get eta_high.
    pub eta_high_offset_db: f64,
    /// Number of vicinity noise samples kept.
    pub noise_window: usize,
    pub selector: SelectorParams,
}

impl Default for ClaParams {
    fn default() -> Self {
        ClaParams {
            n_ref: 8,
            horizon_s: 1.0,
            slot_window: 100,
            alpha: 0.25,
            ttl_s: 5.0,
            streak_min: 3,
            delta_down_db: 1.0,
            margin_db: 3.0,
            eta_low_offset_db: 6.0,
            eta_high_offset_db: 12.0,
            noise_window: 32,
            selector: SelectorParams::default(),
        }
    }
}

impl ClaParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_ref == 0 {
            return Err("n_ref must be >= 1".into());
        }
        if !(self.horizon_s > 0.0) {
            return Err("horizon_s must be > 0".into());
        }
        if self.slot_window == 0 || self.noise_window == 0 {
            return Err("slot_window and noise_window must be > 0".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err("alpha must lie in (0, 1]".into());
        }
        if !(self.delta_down_db > 0.0) {
            return Err("delta_down_db must be > 0".into());
        }
        if !(self.ttl_s > 0.0) {
            return Err("ttl_s must be > 0".into());
        }
        if self.eta_low_offset_db > self.eta_high_offset_db {
            return Err("eta_low_offset_db must not exceed eta_high_offset_db".into());
        }
        Ok(())
    }
}

/// mEsB base ladder: `[0, cw_min]`, then each stage starts one past the
/// previous upper bound and doubles its width, saturating at `cw_max`.
pub fn mesb_base_range(stage: u32, cw_min: u32, cw_max: u32) -> CwRange {
    let (mut lower, mut upper) = (0u32, cw_min.min(cw_max));
    for _ in 0..stage {
        if upper >= cw_max {
            break;
        }
        lower = upper + 1;
        upper = (2 * (u64::from(upper) + 1) - 1).min(u64::from(cw_max)) as u32;
    }
    CwRange { stage, lower, upper }
}

/// Shrinks the top of `base` in proportion to `n_active_est / n_ref`.
pub fn mesb_effective_range(base: CwRange, n_active_est: u32, n_ref: u32) -> CwRange {
    let frac = (f64::from(n_active_est) / f64::from(n_ref.max(1))).min(1.0);
    let span = f64::from(base.upper - base.lower);
    let upper = base.lower + (span * frac).ceil() as u32;
    CwRange { upper: upper.min(base.upper), ..base }
}

pub fn update_collision_ewma(prev: f64, observed_collision: bool, alpha: f64) -> f64 {
    let x = if observed_collision { 1.0 } else { 0.0 };
    (alpha * x + (1.0 - alpha) * prev).clamp(0.0, 1.0)
}

/// Stage to restart from after a success; never above the current one.
pub fn reset_stage(collision_ewma: f64, current_stage: u32, max_stage: u32) -> u32 {
    let predicted = (collision_ewma * f64::from(max_stage)).round() as u32;
    predicted.min(current_stage)
}

/// Fixed-capacity window of slot observations with a running busy count.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotWindow {
    cap: usize,
    /// Run-length encoded slots, oldest first.
    runs: VecDeque<(bool, usize)>,
    len: usize,
    busy: usize,
}

impl SlotWindow {
    pub fn new(cap: usize) -> SlotWindow {
        SlotWindow { cap, runs: VecDeque::new(), len: 0, busy: 0 }
    }

    pub fn push(&mut self, busy: bool) {
        self.push_many(busy, 1);
    }

    pub fn push_many(&mut self, busy: bool, count: u64) {
        let n = count.min(self.cap as u64) as usize;
        if n == 0 {
            return;
        }
        match self.runs.back_mut() {
            Some((b, k)) if *b == busy => *k += n,
            _ => self.runs.push_back((busy, n)),
        }
        self.len += n;
        self.busy += if busy { n } else { 0 };
        while self.len > self.cap {
            let excess = self.len - self.cap;
            let (b, k) = self.runs.front_mut().expect("len > 0");
            let drop = excess.min(*k);
            *k -= drop;
            self.len -= drop;
            if *b {
                self.busy -= drop;
            }
            if *k == 0 {
                self.runs.pop_front();
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn busy_count(&self) -> usize {
        self.busy
    }
}

/// Busy fraction of the observed slots; an empty window reads as 0.
pub fn slot_utilization(window: &SlotWindow) -> f64 {
    if window.is_empty() {
        0.0
    } else {
        window.busy_count() as f64 / window.len() as f64
    }
}

/// Distinct sources decoded within `horizon` of `now`.
pub fn estimate_active_neighbors(decode_log: &BTreeMap<NodeId, SimTime>, now: SimTime, horizon: SimTime) -> u32 {
    let since = now.saturating_sub(horizon);
    decode_log.values().filter(|&&t| t >= since).count() as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckTimeoutClass {
    OutOfReach,
    CollisionLikely,
}

/// A quiet vicinity during the ACK wait means the frame did not reach;
/// anything else is treated as a collision.
pub fn classify_ack_timeout(noise_samples_dbm: &[f64], eta_low_dbm: f64) -> AckTimeoutClass {
    match linear_mean_dbm(noise_samples_dbm.iter().copied()) {
        Some(mean) if mean < eta_low_dbm => AckTimeoutClass::OutOfReach,
        _ => AckTimeoutClass::CollisionLikely,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerControlState {
    pub tx_power_dbm: f64,
    pub pt_min_dbm: f64,
    pub pt_max_dbm: f64,
    pub success_streak: u32,
    pub delta_down_db: f64,
    pub eta_low_dbm: f64,
    pub eta_high_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PowerTrigger {
    AckTimeout { class: AckTimeoutClass, noise_dbm: f64 },
    AckSuccess { noise_dbm: f64 },
}

/// `floor_dbm` is the minimum power known to reach the current destination,
/// or `None` when unknown.
pub fn power_adjust(
    state: PowerControlState,
    trigger: PowerTrigger,
    floor_dbm: Option<f64>,
    streak_min: u32,
) -> PowerControlState {
    let floor = floor_dbm.map_or(state.pt_min_dbm, |f| f.max(state.pt_min_dbm)).min(state.pt_max_dbm);
    let decreased = (state.tx_power_dbm - state.delta_down_db).max(floor);
    let mut next = state;
    match trigger {
        PowerTrigger::AckTimeout { class: AckTimeoutClass::OutOfReach, .. } => {
            next.tx_power_dbm = (state.tx_power_dbm + 10.0 * 2f64.log10()).min(state.pt_max_dbm);
            next.success_streak = 0;
        }
        PowerTrigger::AckTimeout { class: AckTimeoutClass::CollisionLikely, noise_dbm }
            if noise_dbm > state.eta_high_dbm =>
        {
            next.tx_power_dbm = decreased;
            next.success_streak = 0;
        }
        PowerTrigger::AckSuccess { noise_dbm }
            if noise_dbm > state.eta_high_dbm && state.success_streak >= streak_min =>
        {
            next.tx_power_dbm = decreased;
            next.success_streak = 0;
        }
        _ => next.success_streak = state.success_streak.saturating_add(1),
    }
    next.tx_power_dbm = next.tx_power_dbm.clamp(state.pt_min_dbm, state.pt_max_dbm);
    next
}

/// Power needed for a peer that heard `our_tx_dbm` at `their_prx_dbm` to
/// decode us at the SINR threshold with `margin_db` to spare.
pub fn min_power_to_reach(
    their_prx_dbm: f64,
    our_tx_dbm: f64,
    sinr_thr_db: f64,
    noise_floor_dbm: f64,
    margin_db: f64,
) -> f64 {
    let required_prx = noise_floor_dbm + sinr_thr_db;
    let link_loss = our_tx_dbm - their_prx_dbm;
    required_prx + link_loss + margin_db
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorParams {
    pub cov_threshold: f64,
    pub rate_threshold_bps: f64,
    pub window_s: f64,
}

impl Default for SelectorParams {
    fn default() -> Self {
        SelectorParams { cov_threshold: 0.2, rate_threshold_bps: 50_000.0, window_s: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub mean_rate_bps: f64,
    pub interarrival_cov: f64,
    pub realtime: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Recommendation {
    Csma,
    Tdma,
    MultiChannel,
}

pub fn select_protocol(stats: &FlowStats, params: &SelectorParams) -> Recommendation {
    if stats.realtime {
        Recommendation::MultiChannel
    } else if stats.interarrival_cov < params.cov_threshold && stats.mean_rate_bps >= params.rate_threshold_bps {
        Recommendation::Tdma
    } else {
        Recommendation::Csma
    }
}

/// Rate and inter-arrival CoV of emissions `times` (seconds) over `window_s`.
pub fn flow_stats(times: &[f64], bytes_each: u32, window_s: f64, realtime: bool) -> Option<FlowStats> {
    if times.len() < 2 || !(window_s > 0.0) {
        return None;
    }
    let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / gaps.len() as f64;
    let cov = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    Some(FlowStats {
        mean_rate_bps: times.len() as f64 * f64::from(bytes_each) * 8.0 / window_s,
        interarrival_cov: cov,
        realtime,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborEntry {
    /// What the neighbour measured of our frames.
    pub last_prx_dbm: Option<f64>,
    pub their_tx_power_dbm: f64,
    pub min_power_dbm: Option<f64>,
    pub updated_at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub collision_ewma: f64,
    pub slot_window: SlotWindow,
    pub decode_log: BTreeMap<NodeId, SimTime>,
    pub neighbor_power_table: BTreeMap<NodeId, NeighborEntry>,
    /// Measured interference plus noise, in mW.
    pub noise_samples: VecDeque<(SimTime, f64)>,
    noise_cap: usize,
    /// Latest report issue time applied per origin.
    pub applied_reports: BTreeMap<NodeId, SimTime>,
    pub stale_reports: u64,
    pub stats: KbStats,
}

/// Decision counters kept for diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbStats {
    pub out_of_reach: u64,
    pub collision_likely: u64,
    pub power_up: u64,
    pub power_down: u64,
    pub floor_unknown: u64,
}

impl KnowledgeBase {
    pub fn new(params: &ClaParams) -> KnowledgeBase {
        KnowledgeBase {
            collision_ewma: 0.0,
            slot_window: SlotWindow::new(params.slot_window),
            decode_log: BTreeMap::new(),
            neighbor_power_table: BTreeMap::new(),
            noise_samples: VecDeque::with_capacity(params.noise_window),
            noise_cap: params.noise_window,
            applied_reports: BTreeMap::new(),
            stale_reports: 0,
            stats: KbStats::default(),
        }
    }

    pub fn push_noise_mw(&mut self, at: SimTime, mw: f64) {
        if self.noise_samples.len() == self.noise_cap {
            self.noise_samples.pop_front();
        }
        self.noise_samples.push_back((at, mw));
    }

    /// Samples taken at or after `since`, in dBm.
    pub fn noise_since(&self, since: SimTime) -> Vec<f64> {
        self.noise_samples.iter().filter(|(t, _)| *t >= since).map(|&(_, mw)| mw_to_dbm(mw)).collect()
    }

    pub fn mean_noise_dbm(&self) -> Option<f64> {
        let n = self.noise_samples.len();
        (n > 0).then(|| mw_to_dbm(self.noise_samples.iter().map(|&(_, mw)| mw).sum::<f64>() / n as f64))
    }

    /// Min power to reach `dst`, if a fresh entry exists.
    pub fn floor_for(&self, dst: NodeId, now: SimTime, ttl: SimTime) -> Option<f64> {
        self.neighbor_power_table.get(&dst).filter(|e| e.updated_at + ttl >= now).and_then(|e| e.min_power_dbm)
    }

    pub fn expire(&mut self, now: SimTime, ttl: SimTime) {
        self.neighbor_power_table.retain(|_, e| e.updated_at + ttl >= now);
    }
}

/// CLA-AMAC rules plugged into the DCF state machine.
#[derive(Debug, Clone)]
pub struct ClaAmacPolicy {
    pub params: ClaParams,
    pub kb: KnowledgeBase,
    pub power: PowerControlState,
    cw_min: u32,
    cw_max: u32,
    max_stage: u32,
    noise_floor_dbm: f64,
    horizon: SimTime,
    ttl: SimTime,
}

impl ClaAmacPolicy {
    pub fn new(
        params: ClaParams,
        bounds: PowerBounds,
        initial_dbm: f64,
        noise_floor_dbm: f64,
        cw_min: u32,
        cw_max: u32,
        max_stage: u32,
    ) -> ClaAmacPolicy {
        let power = PowerControlState {
            tx_power_dbm: bounds.clamp(initial_dbm),
            pt_min_dbm: bounds.min_dbm,
            pt_max_dbm: bounds.max_dbm,
            success_streak: 0,
            delta_down_db: params.delta_down_db,
            eta_low_dbm: noise_floor_dbm + params.eta_low_offset_db,
            eta_high_dbm: noise_floor_dbm + params.eta_high_offset_db,
        };
        ClaAmacPolicy {
            kb: KnowledgeBase::new(&params),
            horizon: SimTime::from_secs_f64(params.horizon_s),
            ttl: SimTime::from_secs_f64(params.ttl_s),
            params,
            power,
            cw_min,
            cw_max,
            max_stage,
            noise_floor_dbm,
        }
    }

    pub fn active_neighbors(&self, now: SimTime) -> u32 {
        estimate_active_neighbors(&self.kb.decode_log, now, self.horizon)
    }

    pub fn ttl(&self) -> SimTime {
        self.ttl
    }

    pub fn noise_floor_dbm(&self) -> f64 {
        self.noise_floor_dbm
    }

    fn adjust_power(&mut self, trigger: PowerTrigger, dst: NodeId, now: SimTime) {
        let floor = self.kb.floor_for(dst, now, self.ttl);
        if floor.is_none() {
            self.kb.stats.floor_unknown += 1;
        }
        let before = self.power.tx_power_dbm;
        self.power = power_adjust(self.power, trigger, floor, self.params.streak_min);
        if self.power.tx_power_dbm > before {
            self.kb.stats.power_up += 1;
        } else if self.power.tx_power_dbm < before {
            self.kb.stats.power_down += 1;
        }
    }

    fn vicinity_noise(&self) -> f64 {
        self.kb.mean_noise_dbm().unwrap_or(self.noise_floor_dbm)
    }
}

impl AccessPolicy for ClaAmacPolicy {
    fn protocol(&self) -> Protocol {
        Protocol::ClaAmac
    }

    fn contention_range(&mut self, stage: u32, now: SimTime) -> CwRange {
        let base = mesb_base_range(stage, self.cw_min, self.cw_max);
        mesb_effective_range(base, self.active_neighbors(now), self.params.n_ref)
    }

    fn stage_after_success(&mut self, stage: u32) -> u32 {
        reset_stage(self.kb.collision_ewma, stage, self.max_stage)
    }

    fn on_success(&mut self, now: SimTime, dst: NodeId) {
        self.kb.collision_ewma = update_collision_ewma(self.kb.collision_ewma, false, self.params.alpha);
        let trigger = PowerTrigger::AckSuccess { noise_dbm: self.vicinity_noise() };
        self.adjust_power(trigger, dst, now);
    }

    fn on_failure(&mut self, now: SimTime, dst: NodeId, wait_since: SimTime) {
        let class = classify_ack_timeout(&self.kb.noise_since(wait_since), self.power.eta_low_dbm);
        let collided = class == AckTimeoutClass::CollisionLikely;
        self.kb.collision_ewma = update_collision_ewma(self.kb.collision_ewma, collided, self.params.alpha);
        match class {
            AckTimeoutClass::OutOfReach => self.kb.stats.out_of_reach += 1,
            AckTimeoutClass::CollisionLikely => self.kb.stats.collision_likely += 1,
        }
        let trigger = PowerTrigger::AckTimeout { class, noise_dbm: self.vicinity_noise() };
        self.adjust_power(trigger, dst, now);
    }

    fn tx_power_dbm(&self, _dst: NodeId, _now: SimTime) -> f64 {
        self.power.tx_power_dbm
    }

    fn power_bounds(&self) -> PowerBounds {
        PowerBounds { min_dbm: self.power.pt_min_dbm, max_dbm: self.power.pt_max_dbm }
    }

    fn observe_decoded(&mut self, now: SimTime, rx: &RxInfo) {
        self.kb.decode_log.insert(rx.frame.src, now);
    }

    fn wants_noise_samples(&self) -> bool {
        true
    }

    fn observe_noise(&mut self, now: SimTime, mw: f64) {
        self.kb.push_noise_mw(now, mw);
    }

    fn observe_slots(&mut self, busy: bool, count: u64) {
        self.kb.slot_window.push_many(busy, count);
    }

    fn knowledge(&self) -> Option<&KnowledgeBase> {
        Some(&self.kb)
    }

    fn knowledge_mut(&mut self) -> Option<&mut KnowledgeBase> {
        Some(&mut self.kb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pcs(tx: f64) -> PowerControlState {
        PowerControlState {
            tx_power_dbm: tx,
            pt_min_dbm: 10.03,
            pt_max_dbm: 23.03,
            success_streak: 0,
            delta_down_db: 1.0,
            eta_low_dbm: -90.0,
            eta_high_dbm: -84.0,
        }
    }

    #[test]
    fn base_ladder() {
        let r = |s| mesb_base_range(s, 15, 1023);
        assert_eq!((r(0).lower, r(0).upper), (0, 15));
        assert_eq!((r(2).lower, r(2).upper), (32, 63));
        assert_eq!((r(6).lower, r(6).upper), (512, 1023));
        assert_eq!((r(8).lower, r(8).upper), (512, 1023));
    }

    #[test]
    fn effective_range_examples() {
        let base = mesb_base_range(2, 15, 1023);
        assert_eq!(mesb_effective_range(base, 8, 8), base);
        assert_eq!(mesb_effective_range(base, 20, 8), base);
        let r = mesb_effective_range(base, 2, 8);
        assert_eq!((r.lower, r.upper), (32, 40));
        let r = mesb_effective_range(base, 0, 8);
        assert_eq!((r.lower, r.upper), (32, 32));
    }

    #[test]
    fn ewma_examples() {
        assert!((update_collision_ewma(0.2, true, 0.25) - 0.4).abs() < 1e-12);
        assert_eq!(update_collision_ewma(0.7, true, 1.0), 1.0);
        assert_eq!(update_collision_ewma(0.7, false, 1.0), 0.0);
        let mut e = 1.0;
        for _ in 0..18 {
            e = update_collision_ewma(e, false, 0.25);
        }
        assert!(e <= 0.01);
        assert!((e - 0.75f64.powi(18)).abs() < 1e-12);
    }

    #[test]
    fn reset_examples() {
        assert_eq!(reset_stage(0.0, 5, 6), 0);
        assert_eq!(reset_stage(0.5, 6, 6), 3);
        assert_eq!(reset_stage(1.0, 2, 6), 2);
    }

    #[test]
    fn slot_utilization_examples() {
        let mut w = SlotWindow::new(100);
        assert_eq!(slot_utilization(&w), 0.0);
        w.push_many(false, 100);
        assert_eq!(slot_utilization(&w), 0.0);
        w.push_many(true, 25);
        assert_eq!(slot_utilization(&w), 0.25);
        w.push_many(true, 1000);
        assert_eq!(slot_utilization(&w), 1.0);
        assert_eq!(w.len(), 100);
    }

    #[test]
    fn active_neighbor_examples() {
        let now = SimTime::from_secs(10);
        let h = SimTime::from_secs(1);
        let mut log = BTreeMap::new();
        assert_eq!(estimate_active_neighbors(&log, now, h), 0);
        for (n, t) in [(1, 9_500), (2, 9_900), (3, 10_000), (4, 8_000), (5, 8_999)] {
            log.insert(NodeId(n), SimTime::from_millis(t));
        }
        assert_eq!(estimate_active_neighbors(&log, now, h), 3);
        let mut same = BTreeMap::new();
        for i in 0..50 {
            same.insert(NodeId(7), SimTime::from_millis(9_990 + i / 10));
        }
        assert_eq!(estimate_active_neighbors(&same, now, h), 1);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_ack_timeout(&[-96.0; 5], -90.0), AckTimeoutClass::OutOfReach);
        assert_eq!(classify_ack_timeout(&[-96.0, -96.0, -96.0, -70.0], -90.0), AckTimeoutClass::CollisionLikely);
        assert_eq!(classify_ack_timeout(&[], -90.0), AckTimeoutClass::CollisionLikely);
    }

    #[test]
    fn power_examples() {
        let out = AckTimeoutClass::OutOfReach;
        let s = power_adjust(pcs(23.03), PowerTrigger::AckTimeout { class: out, noise_dbm: -96.0 }, None, 3);
        assert_eq!(s.tx_power_dbm, 23.03);
        let s = power_adjust(pcs(15.0), PowerTrigger::AckTimeout { class: out, noise_dbm: -96.0 }, None, 3);
        assert!((s.tx_power_dbm - 18.0103).abs() < 1e-4);

        let mut st = pcs(20.0);
        st.success_streak = 3;
        let s = power_adjust(st, PowerTrigger::AckSuccess { noise_dbm: -80.0 }, Some(16.05), 3);
        assert!((s.tx_power_dbm - 19.0).abs() < 1e-12);
        assert_eq!(s.success_streak, 0);

        // Quiet vicinity: hold and count the streak.
        let s = power_adjust(st, PowerTrigger::AckSuccess { noise_dbm: -95.0 }, None, 3);
        assert_eq!((s.tx_power_dbm, s.success_streak), (20.0, 4));

        // Collision under heavy noise: step down, but not through the floor.
        let s = power_adjust(
            pcs(16.5),
            PowerTrigger::AckTimeout { class: AckTimeoutClass::CollisionLikely, noise_dbm: -70.0 },
            Some(16.05),
            3,
        );
        assert!((s.tx_power_dbm - 16.05).abs() < 1e-12);
    }

    #[test]
    fn min_power_examples() {
        assert!((min_power_to_reach(-70.0, 20.0, 22.05, -96.0, 3.0) - 19.05).abs() < 1e-9);
        assert!((min_power_to_reach(-73.95, 17.0, 22.05, -96.0, 0.0) - 17.0).abs() < 1e-9);
        assert!((min_power_to_reach(-63.95, 17.0, 22.05, -96.0, 0.0) - 7.0).abs() < 1e-9);
    }

    #[test]
    fn selector_examples() {
        let p = SelectorParams::default();
        let cbr: Vec<f64> = (0..40).map(|i| f64::from(i) * 0.025).collect();
        let stats = flow_stats(&cbr, 2048, 1.0, false).unwrap();
        assert!(stats.interarrival_cov < 1e-9);
        assert_eq!(select_protocol(&stats, &p), Recommendation::Tdma);
        assert_eq!(select_protocol(&FlowStats { realtime: true, ..stats }, &p), Recommendation::MultiChannel);
        let bursty = FlowStats { mean_rate_bps: 20_000.0, interarrival_cov: 1.5, realtime: false };
        assert_eq!(select_protocol(&bursty, &p), Recommendation::Csma);
    }

    proptest! {
        #[test]
        fn slot_window_matches_plain_buffer(cap in 1usize..200, pushes in prop::collection::vec((any::<bool>(), 0u64..400), 0..60)) {
            let mut w = SlotWindow::new(cap);
            let mut plain: VecDeque<bool> = VecDeque::new();
            for (busy, count) in pushes {
                w.push_many(busy, count);
                for _ in 0..count {
                    plain.push_back(busy);
                    if plain.len() > cap {
                        plain.pop_front();
                    }
                }
                prop_assert_eq!(w.len(), plain.len());
                prop_assert_eq!(w.busy_count(), plain.iter().filter(|b| **b).count());
            }
        }

        #[test]
        fn base_ranges_partition(cw_min in 1u32..64, extra in 0u32..4000) {
            let cw_max = cw_min + extra;
            let mut next = 0u32;
            let mut stage = 0;
            loop {
                let r = mesb_base_range(stage, cw_min, cw_max);
                prop_assert_eq!(r.lower, next);
                prop_assert!(r.lower <= r.upper && r.upper <= cw_max);
                if r.upper == cw_max {
                    prop_assert_eq!(mesb_base_range(stage + 1, cw_min, cw_max), CwRange { stage: stage + 1, ..r });
                    break;
                }
                next = r.upper + 1;
                stage += 1;
            }
        }

        #[test]
        fn effective_within_base_and_monotone(stage in 0u32..10, n in 0u32..20, n_ref in 1u32..16) {
            let base = mesb_base_range(stage, 15, 1023);
            let a = mesb_effective_range(base, n, n_ref);
            let b = mesb_effective_range(base, n + 1, n_ref);
            prop_assert!(a.lower == base.lower && a.upper <= base.upper && a.upper >= a.lower);
            prop_assert!(b.upper >= a.upper);
        }

        #[test]
        fn reset_never_exceeds_current(e in 0.0f64..=1.0, s in 0u32..10, m in 0u32..10) {
            prop_assert!(reset_stage(e, s, m) <= s);
            prop_assert_eq!(reset_stage(0.0, s, m), 0);
        }

        #[test]
        fn ewma_bounded(obs in prop::collection::vec(any::<bool>(), 0..200), alpha in 0.01f64..=1.0) {
            let mut e = 0.0;
            for o in obs {
                e = update_collision_ewma(e, o, alpha);
                prop_assert!((0.0..=1.0).contains(&e));
            }
        }

        #[test]
        fn power_stays_in_bounds(
            triggers in prop::collection::vec((0u8..3, -100.0f64..-40.0), 0..200),
            floor in prop::option::of(0.0f64..30.0),
        ) {
            let mut s = pcs(23.03);
            for (k, noise_dbm) in triggers {
                let before = s.tx_power_dbm;
                let t = match k {
                    0 => PowerTrigger::AckTimeout { class: AckTimeoutClass::OutOfReach, noise_dbm },
                    1 => PowerTrigger::AckTimeout { class: AckTimeoutClass::CollisionLikely, noise_dbm },
                    _ => PowerTrigger::AckSuccess { noise_dbm },
                };
                s = power_adjust(s, t, floor, 3);
                prop_assert!(s.tx_power_dbm >= s.pt_min_dbm && s.tx_power_dbm <= s.pt_max_dbm);
                if k == 0 {
                    let doubled = (before + 10.0 * 2f64.log10()).min(s.pt_max_dbm);
                    prop_assert!((s.tx_power_dbm - doubled).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn classify_monotone(samples in prop::collection::vec(-100.0f64..-40.0, 1..20), idx in 0usize..20, bump in 0.0f64..30.0) {
            let before = classify_ack_timeout(&samples, -90.0);
            let mut raised = samples.clone();
            let i = idx % raised.len();
            raised[i] += bump;
            let after = classify_ack_timeout(&raised, -90.0);
            prop_assert!(!(before == AckTimeoutClass::CollisionLikely && after == AckTimeoutClass::OutOfReach));
        }

        #[test]
        fn selector_pure(rate in 0.0f64..1e6, cov in 0.0f64..3.0, rt in any::<bool>()) {
            let s = FlowStats { mean_rate_bps: rate, interarrival_cov: cov, realtime: rt };
            let p = SelectorParams::default();
            prop_assert_eq!(select_protocol(&s, &p), select_protocol(&s, &p));
        }
    }
}
