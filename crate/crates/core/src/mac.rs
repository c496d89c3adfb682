//! IEEE 802.11 DCF: CSMA/CA with basic or RTS/CTS access, ACK and retry
//! handling, and a pluggable [`AccessPolicy`] that owns the contention-window
//! ladder, the post-transmission reset rule and the transmit power.
//!
//! The state machine is driven purely by [`MacInput`]s and answers with
//! [`MacAction`]s; timers, the channel and the queue of upper-layer packets
//! live in the caller.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::channel::PhyParams;
use crate::cla::KnowledgeBase;
use crate::kernel::SimTime;
use crate::rng::RngStream;
use crate::scenario::Protocol;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Data,
    Ack,
    Rts,
    Cts,
    GcpReport,
}

impl FrameKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameKind::Data => "DATA",
            FrameKind::Ack => "ACK",
            FrameKind::Rts => "RTS",
            FrameKind::Cts => "CTS",
            FrameKind::GcpReport => "GCP",
        }
    }
}

/// An application packet travelling end to end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub id: u64,
    pub origin: NodeId,
    pub final_dst: NodeId,
    pub created_at: SimTime,
    pub payload_bytes: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub src: NodeId,
    pub dst: NodeId,
    pub seq: u64,
    pub payload_bytes: u32,
    pub tx_power_dbm: f64,
    pub created_at: SimTime,
    /// Duration field: how long after this frame ends the exchange keeps the medium.
    pub nav: SimTime,
    pub packet: Option<Packet>,
}

impl Frame {
    pub fn data_for_test(src: NodeId, dst: NodeId, payload_bytes: u32) -> Frame {
        Frame {
            kind: FrameKind::Data,
            src,
            dst,
            seq: 0,
            payload_bytes,
            tx_power_dbm: 20.0,
            created_at: SimTime::ZERO,
            nav: SimTime::ZERO,
            packet: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessScheme {
    Basic,
    RtsCts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacTimings {
    pub slot_us: u64,
    pub sifs_us: u64,
    pub difs_us: u64,
    pub retry_limit: u32,
    pub cw_min: u32,
    pub cw_max: u32,
    pub queue_cap: usize,
    pub access: AccessScheme,
    /// Payloads at or above this size use RTS/CTS when `access` is `rts_cts`.
    pub rts_threshold_bytes: u32,
}

impl Default for MacTimings {
    fn default() -> Self {
        MacTimings {
            slot_us: 20,
            sifs_us: 10,
            difs_us: 50,
            retry_limit: 7,
            cw_min: 15,
            cw_max: 1023,
            queue_cap: 50,
            access: AccessScheme::Basic,
            rts_threshold_bytes: 0,
        }
    }
}

impl MacTimings {
    pub fn slot(&self) -> SimTime {
        SimTime::from_micros(self.slot_us)
    }

    pub fn sifs(&self) -> SimTime {
        SimTime::from_micros(self.sifs_us)
    }

    pub fn difs(&self) -> SimTime {
        SimTime::from_micros(self.difs_us)
    }

    /// SIFS + ACK airtime + 2 slots.
    pub fn ack_timeout(&self, phy: &PhyParams) -> SimTime {
        self.sifs() + phy.airtime(FrameKind::Ack, 0) + self.slot() * 2
    }

    pub fn cts_timeout(&self, phy: &PhyParams) -> SimTime {
        self.sifs() + phy.airtime(FrameKind::Cts, 0) + self.slot() * 2
    }

    /// Highest stage whose BEB window is still growing.
    pub fn max_stage(&self) -> u32 {
        let mut stage = 0;
        while beb_next_range(stage, self.cw_min, self.cw_max).upper < self.cw_max {
            stage += 1;
        }
        stage
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.slot_us == 0 {
            return Err("slot_us must be > 0".into());
        }
        if self.difs_us != self.sifs_us + 2 * self.slot_us {
            return Err(format!(
                "difs_us must equal sifs_us + 2*slot_us ({} != {})",
                self.difs_us,
                self.sifs_us + 2 * self.slot_us
            ));
        }
        if self.cw_min == 0 || self.cw_min > self.cw_max {
            return Err("require 0 < cw_min <= cw_max".into());
        }
        if self.queue_cap == 0 {
            return Err("queue_cap must be > 0".into());
        }
        Ok(())
    }
}

/// A contention-window draw range, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CwRange {
    pub stage: u32,
    pub lower: u32,
    pub upper: u32,
}

impl CwRange {
    pub fn contains(&self, slots: u32) -> bool {
        (self.lower..=self.upper).contains(&slots)
    }

    pub fn mean(&self) -> f64 {
        (f64::from(self.lower) + f64::from(self.upper)) / 2.0
    }
}

/// Binary exponential backoff: `[0, min((cw_min+1)·2^stage − 1, cw_max)]`.
pub fn beb_next_range(stage: u32, cw_min: u32, cw_max: u32) -> CwRange {
    let width = u64::from(cw_min + 1).checked_shl(stage.min(40)).unwrap_or(u64::MAX);
    let upper = width.saturating_sub(1).min(u64::from(cw_max)) as u32;
    CwRange { stage, lower: 0, upper }
}

pub fn backoff_draw(range: CwRange, rng: &mut RngStream) -> u32 {
    rng.uniform_inclusive(range.lower, range.upper)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttemptOutcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBounds {
    pub min_dbm: f64,
    pub max_dbm: f64,
}

impl PowerBounds {
    pub fn clamp(&self, dbm: f64) -> f64 {
        dbm.clamp(self.min_dbm, self.max_dbm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasicPcParams {
    pub step_down_db: f64,
    pub step_up_db: f64,
}

impl Default for BasicPcParams {
    fn default() -> Self {
        BasicPcParams { step_down_db: 1.0, step_up_db: 2.0 }
    }
}

/// Blind power control: one step down after each ACK, a larger step up after
/// each missing ACK. No interference input.
pub fn basic_pc_adjust(tx_power_dbm: f64, outcome: AttemptOutcome, bounds: PowerBounds, params: BasicPcParams) -> f64 {
    match outcome {
        AttemptOutcome::Success => (tx_power_dbm - params.step_down_db).max(bounds.min_dbm),
        AttemptOutcome::Failure => (tx_power_dbm + params.step_up_db).min(bounds.max_dbm),
    }
}

/// Protocol-specific rules layered over the DCF state machine.
pub trait AccessPolicy: Send {
    fn protocol(&self) -> Protocol;

    fn contention_range(&mut self, stage: u32, now: SimTime) -> CwRange;

    /// Stage for the next frame after an acknowledged transmission.
    fn stage_after_success(&mut self, stage: u32) -> u32;

    /// Stage for the next frame after the retry limit dropped a frame.
    fn stage_after_drop(&mut self, stage: u32) -> u32 {
        self.stage_after_success(stage)
    }

    fn on_success(&mut self, now: SimTime, dst: NodeId);

    /// `wait_since` is the instant the ACK (or CTS) wait began.
    fn on_failure(&mut self, now: SimTime, dst: NodeId, wait_since: SimTime);

    fn tx_power_dbm(&self, dst: NodeId, now: SimTime) -> f64;

    fn power_bounds(&self) -> PowerBounds;

    fn observe_decoded(&mut self, _now: SimTime, _rx: &RxInfo) {}

    fn wants_noise_samples(&self) -> bool {
        false
    }

    fn observe_noise(&mut self, _now: SimTime, _mw: f64) {}

    fn observe_slots(&mut self, _busy: bool, _count: u64) {}

    fn knowledge(&self) -> Option<&KnowledgeBase> {
        None
    }

    fn knowledge_mut(&mut self) -> Option<&mut KnowledgeBase> {
        None
    }
}

/// Plain 802.11 DCF at fixed maximum power.
#[derive(Debug, Clone)]
pub struct DcfPolicy {
    pub cw_min: u32,
    pub cw_max: u32,
    pub bounds: PowerBounds,
}

impl AccessPolicy for DcfPolicy {
    fn protocol(&self) -> Protocol {
        Protocol::Dcf
    }

    fn contention_range(&mut self, stage: u32, _now: SimTime) -> CwRange {
        beb_next_range(stage, self.cw_min, self.cw_max)
    }

    fn stage_after_success(&mut self, _stage: u32) -> u32 {
        0
    }

    fn on_success(&mut self, _now: SimTime, _dst: NodeId) {}

    fn on_failure(&mut self, _now: SimTime, _dst: NodeId, _wait_since: SimTime) {}

    fn tx_power_dbm(&self, _dst: NodeId, _now: SimTime) -> f64 {
        self.bounds.max_dbm
    }

    fn power_bounds(&self) -> PowerBounds {
        self.bounds
    }
}

/// DCF contention with [`basic_pc_adjust`] power steps.
#[derive(Debug, Clone)]
pub struct BasicPcPolicy {
    pub cw_min: u32,
    pub cw_max: u32,
    pub bounds: PowerBounds,
    pub params: BasicPcParams,
    pub tx_power_dbm: f64,
}

impl AccessPolicy for BasicPcPolicy {
    fn protocol(&self) -> Protocol {
        Protocol::BasicPc
    }

    fn contention_range(&mut self, stage: u32, _now: SimTime) -> CwRange {
        beb_next_range(stage, self.cw_min, self.cw_max)
    }

    fn stage_after_success(&mut self, _stage: u32) -> u32 {
        0
    }

    fn on_success(&mut self, _now: SimTime, _dst: NodeId) {
        self.tx_power_dbm = basic_pc_adjust(self.tx_power_dbm, AttemptOutcome::Success, self.bounds, self.params);
    }

    fn on_failure(&mut self, _now: SimTime, _dst: NodeId, _wait_since: SimTime) {
        self.tx_power_dbm = basic_pc_adjust(self.tx_power_dbm, AttemptOutcome::Failure, self.bounds, self.params);
    }

    fn tx_power_dbm(&self, _dst: NodeId, _now: SimTime) -> f64 {
        self.tx_power_dbm
    }

    fn power_bounds(&self) -> PowerBounds {
        self.bounds
    }
}

/// Reception details handed to the MAC with every decoded frame.
#[derive(Debug, Clone)]
pub struct RxInfo {
    pub frame: Frame,
    pub rx_power_dbm: f64,
    pub sinr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MacTimer {
    Backoff,
    AckTimeout,
    CtsTimeout,
    Response,
    SifsData,
    Nav,
}

impl MacTimer {
    pub const ALL: [MacTimer; 6] = [
        MacTimer::Backoff,
        MacTimer::AckTimeout,
        MacTimer::CtsTimeout,
        MacTimer::Response,
        MacTimer::SifsData,
        MacTimer::Nav,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MacTimer::Backoff => "backoff",
            MacTimer::AckTimeout => "ack_timeout",
            MacTimer::CtsTimeout => "cts_timeout",
            MacTimer::Response => "response",
            MacTimer::SifsData => "sifs_data",
            MacTimer::Nav => "nav",
        }
    }
}

#[derive(Debug, Clone)]
pub enum MacInput {
    /// Physical carrier sense changed (own transmissions excluded).
    MediumBusy,
    MediumIdle,
    Timer(MacTimer),
    TxComplete,
    RxFrame(RxInfo),
}

impl MacInput {
    pub fn label(&self) -> &'static str {
        match self {
            MacInput::MediumBusy => "medium_busy",
            MacInput::MediumIdle => "medium_idle",
            MacInput::Timer(t) => t.as_str(),
            MacInput::TxComplete => "tx_complete",
            MacInput::RxFrame(_) => "rx_frame",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    QueueFull,
    RetryLimit,
    Unroutable,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MacAction {
    Transmit(Frame),
    SetTimer(MacTimer, SimTime),
    CancelTimer(MacTimer),
    /// A non-duplicate DATA frame addressed to this node.
    Deliver {
        packet: Packet,
        from: NodeId,
    },
    Acked {
        packet: Packet,
        next_hop: NodeId,
        attempts: u32,
    },
    Dropped {
        packet: Packet,
        reason: DropReason,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MacError {
    #[error("transmit queue full")]
    QueueFull,
    #[error("illegal MAC transition: {input} while {state}")]
    IllegalTransition { input: &'static str, state: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Contending,
    TxData,
    WaitAck,
    TxRts,
    WaitCts,
    AwaitSifsData,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::Contending => "contending",
            Phase::TxData => "tx_data",
            Phase::WaitAck => "wait_ack",
            Phase::TxRts => "tx_rts",
            Phase::WaitCts => "wait_cts",
            Phase::AwaitSifsData => "await_sifs_data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Attempt {
    packet: Packet,
    next_hop: NodeId,
    seq: u64,
    retries: u32,
}

/// Backoff bookkeeping for the head-of-line frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackoffState {
    pub stage: u32,
    pub range: CwRange,
    pub counter: u32,
    pub retries: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacStats {
    pub data_attempts: u64,
    pub acked: u64,
    pub ack_timeouts: u64,
    pub cts_timeouts: u64,
    pub drops_queue: u64,
    pub drops_retry: u64,
    pub duplicates: u64,
}

pub struct Mac {
    id: NodeId,
    timings: MacTimings,
    phy: PhyParams,
    max_stage: u32,
    queue: VecDeque<(Packet, NodeId)>,
    head: Option<Attempt>,
    phase: Phase,
    stage: u32,
    range: CwRange,
    counter: u32,
    /// Start of the current DIFS + countdown, when one is running.
    countdown_from: Option<SimTime>,
    phys_busy: bool,
    busy_since: SimTime,
    idle_since: SimTime,
    nav_until: SimTime,
    transmitting: Option<FrameKind>,
    response: Option<Frame>,
    wait_since: SimTime,
    next_seq: u64,
    last_rx_seq: BTreeMap<NodeId, u64>,
    policy: Box<dyn AccessPolicy>,
    rng: RngStream,
    stats: MacStats,
}

impl Mac {
    pub fn new(id: NodeId, timings: MacTimings, phy: PhyParams, policy: Box<dyn AccessPolicy>, rng: RngStream) -> Mac {
        let max_stage = timings.max_stage();
        Mac {
            id,
            max_stage,
            queue: VecDeque::new(),
            head: None,
            phase: Phase::Idle,
            stage: 0,
            range: CwRange { stage: 0, lower: 0, upper: timings.cw_min },
            counter: 0,
            countdown_from: None,
            phys_busy: false,
            busy_since: SimTime::ZERO,
            idle_since: SimTime::ZERO,
            nav_until: SimTime::ZERO,
            transmitting: None,
            response: None,
            wait_since: SimTime::ZERO,
            next_seq: 0,
            last_rx_seq: BTreeMap::new(),
            timings,
            phy,
            policy,
            rng,
            stats: MacStats::default(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn policy(&self) -> &dyn AccessPolicy {
        self.policy.as_ref()
    }

    pub fn policy_mut(&mut self) -> &mut dyn AccessPolicy {
        self.policy.as_mut()
    }

    pub fn stats(&self) -> MacStats {
        self.stats
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len() + usize::from(self.head.is_some())
    }

    pub fn backoff_state(&self) -> BackoffState {
        BackoffState {
            stage: self.stage,
            range: self.range,
            counter: self.counter,
            retries: self.head.map_or(0, |h| h.retries),
        }
    }

    pub fn state_name(&self) -> &'static str {
        self.phase.as_str()
    }

    pub fn current_power_dbm(&self, now: SimTime) -> f64 {
        let dst = self.head.map_or(self.id, |h| h.next_hop);
        self.policy.tx_power_dbm(dst, now)
    }

    /// Whether the node's own transmit path considers the medium busy.
    fn busy(&self, now: SimTime) -> bool {
        self.phys_busy || self.transmitting.is_some() || now < self.nav_until
    }

    /// Queues a packet for `next_hop`. Fails with `QueueFull` at the cap.
    pub fn enqueue(&mut self, packet: Packet, next_hop: NodeId, now: SimTime) -> Result<Vec<MacAction>, MacError> {
        if self.queue_len() >= self.timings.queue_cap {
            self.stats.drops_queue += 1;
            return Err(MacError::QueueFull);
        }
        self.queue.push_back((packet, next_hop));
        let mut out = Vec::new();
        if self.head.is_none() {
            self.start_next(now, &mut out);
        }
        Ok(out)
    }

    /// Discards everything queued (node death). Returns the discarded packets.
    pub fn flush(&mut self) -> Vec<Packet> {
        let mut lost: Vec<Packet> = self.head.take().map(|h| h.packet).into_iter().collect();
        lost.extend(self.queue.drain(..).map(|(p, _)| p));
        self.phase = Phase::Idle;
        self.countdown_from = None;
        self.response = None;
        lost
    }

    pub fn step(&mut self, input: MacInput, now: SimTime) -> Result<Vec<MacAction>, MacError> {
        let mut out = Vec::new();
        match input {
            MacInput::MediumBusy => {
                if !self.phys_busy {
                    self.phys_busy = true;
                    self.busy_since = now;
                    self.observe_idle_period(now);
                    self.freeze(now, &mut out);
                }
            }
            MacInput::MediumIdle => {
                if self.phys_busy {
                    self.phys_busy = false;
                    self.idle_since = now;
                    let busy = now.saturating_sub(self.busy_since);
                    let slots = busy.as_nanos().div_ceil(self.timings.slot().as_nanos());
                    self.policy.observe_slots(true, slots);
                    self.resume(now, &mut out);
                }
            }
            MacInput::Timer(timer) => self.on_timer(timer, now, &mut out)?,
            MacInput::TxComplete => self.on_tx_complete(now, &mut out)?,
            MacInput::RxFrame(rx) => self.on_rx(rx, now, &mut out),
        }
        Ok(out)
    }

    fn observe_idle_period(&mut self, now: SimTime) {
        let idle = now.saturating_sub(self.idle_since);
        let slots = idle.as_nanos() / self.timings.slot().as_nanos();
        if slots > 0 {
            self.policy.observe_slots(false, slots);
        }
    }

    fn illegal(&self, input: &'static str) -> MacError {
        MacError::IllegalTransition { input, state: self.phase.as_str() }
    }

    fn start_next(&mut self, now: SimTime, out: &mut Vec<MacAction>) {
        debug_assert!(self.head.is_none());
        let Some((packet, next_hop)) = self.queue.pop_front() else {
            self.phase = Phase::Idle;
            return;
        };
        self.head = Some(Attempt { packet, next_hop, seq: self.next_seq, retries: 0 });
        self.next_seq += 1;
        self.draw(now);
        self.phase = Phase::Contending;
        self.resume(now, out);
    }

    fn draw(&mut self, now: SimTime) {
        self.range = self.policy.contention_range(self.stage, now);
        self.counter = backoff_draw(self.range, &mut self.rng);
    }

    /// Starts DIFS + countdown if contending on an idle medium.
    fn resume(&mut self, now: SimTime, out: &mut Vec<MacAction>) {
        if self.phase != Phase::Contending || self.countdown_from.is_some() || self.busy(now) {
            return;
        }
        self.countdown_from = Some(now);
        let fire = now + self.timings.difs() + self.timings.slot() * u64::from(self.counter);
        out.push(MacAction::SetTimer(MacTimer::Backoff, fire));
    }

    /// Freezes a running countdown, crediting every whole idle slot after DIFS.
    fn freeze(&mut self, now: SimTime, out: &mut Vec<MacAction>) {
        let Some(from) = self.countdown_from.take() else { return };
        let elapsed = now.saturating_sub(from + self.timings.difs());
        let slots = (elapsed.as_nanos() / self.timings.slot().as_nanos()).min(u64::from(self.counter)) as u32;
        self.counter -= slots;
        out.push(MacAction::CancelTimer(MacTimer::Backoff));
    }

    fn head_frame(&self, kind: FrameKind, now: SimTime) -> Frame {
        let head = self.head.expect("head frame");
        let sifs = self.timings.sifs();
        let ack = self.phy.airtime(FrameKind::Ack, 0);
        let cts = self.phy.airtime(FrameKind::Cts, 0);
        let data = self.phy.airtime(FrameKind::Data, head.packet.payload_bytes);
        let bounds = self.policy.power_bounds();
        let (tx_power_dbm, nav, payload_bytes) = match kind {
            FrameKind::Rts => (bounds.max_dbm, sifs * 3 + cts + data + ack, 0),
            FrameKind::Data => (
                self.policy.tx_power_dbm(head.next_hop, now),
                if head.next_hop.is_broadcast() { SimTime::ZERO } else { sifs + ack },
                head.packet.payload_bytes,
            ),
            _ => unreachable!("head frames are DATA or RTS"),
        };
        Frame {
            kind,
            src: self.id,
            dst: head.next_hop,
            seq: head.seq,
            payload_bytes,
            tx_power_dbm,
            created_at: head.packet.created_at,
            nav,
            packet: Some(head.packet),
        }
    }

    fn wants_rts(&self) -> bool {
        let head = self.head.expect("head");
        self.timings.access == AccessScheme::RtsCts
            && !head.next_hop.is_broadcast()
            && head.packet.payload_bytes >= self.timings.rts_threshold_bytes
    }

    fn on_timer(&mut self, timer: MacTimer, now: SimTime, out: &mut Vec<MacAction>) -> Result<(), MacError> {
        match timer {
            MacTimer::Backoff => {
                if self.phase != Phase::Contending || self.countdown_from.is_none() {
                    return Err(self.illegal("backoff"));
                }
                self.countdown_from = None;
                self.policy.observe_slots(false, u64::from(self.counter));
                self.counter = 0;
                if self.transmitting.is_some() {
                    // A SIFS response won the race; contend again once it is done.
                    return Ok(());
                }
                let kind = if self.wants_rts() { FrameKind::Rts } else { FrameKind::Data };
                self.phase = if kind == FrameKind::Rts { Phase::TxRts } else { Phase::TxData };
                if kind == FrameKind::Data {
                    self.stats.data_attempts += 1;
                }
                self.transmitting = Some(kind);
                out.push(MacAction::Transmit(self.head_frame(kind, now)));
            }
            MacTimer::SifsData => {
                if self.phase != Phase::AwaitSifsData {
                    return Err(self.illegal("sifs_data"));
                }
                if self.transmitting.is_some() {
                    return self.fail_attempt(now, out);
                }
                self.phase = Phase::TxData;
                self.stats.data_attempts += 1;
                self.transmitting = Some(FrameKind::Data);
                out.push(MacAction::Transmit(self.head_frame(FrameKind::Data, now)));
            }
            MacTimer::AckTimeout => {
                if self.phase != Phase::WaitAck {
                    return Err(self.illegal("ack_timeout"));
                }
                self.stats.ack_timeouts += 1;
                self.fail_attempt(now, out)?;
            }
            MacTimer::CtsTimeout => {
                if self.phase != Phase::WaitCts {
                    return Err(self.illegal("cts_timeout"));
                }
                self.stats.cts_timeouts += 1;
                self.fail_attempt(now, out)?;
            }
            MacTimer::Response => {
                let Some(frame) = self.response.take() else {
                    return Err(self.illegal("response"));
                };
                if self.transmitting.is_none() {
                    self.freeze(now, out);
                    self.transmitting = Some(frame.kind);
                    out.push(MacAction::Transmit(frame));
                }
            }
            MacTimer::Nav => self.resume(now, out),
        }
        Ok(())
    }

    fn fail_attempt(&mut self, now: SimTime, out: &mut Vec<MacAction>) -> Result<(), MacError> {
        let mut head = self.head.ok_or_else(|| self.illegal("attempt_failed"))?;
        self.policy.on_failure(now, head.next_hop, self.wait_since);
        head.retries += 1;
        if head.retries > self.timings.retry_limit {
            self.stats.drops_retry += 1;
            out.push(MacAction::Dropped { packet: head.packet, reason: DropReason::RetryLimit });
            self.stage = self.policy.stage_after_drop(self.stage).min(self.max_stage);
            self.range = self.policy.contention_range(self.stage, now);
            self.head = None;
            self.start_next(now, out);
        } else {
            self.head = Some(head);
            self.stage = (self.stage + 1).min(self.max_stage);
            self.draw(now);
            self.phase = Phase::Contending;
            self.resume(now, out);
        }
        Ok(())
    }

    fn succeed_attempt(&mut self, now: SimTime, out: &mut Vec<MacAction>) {
        let head = self.head.take().expect("head on success");
        self.stats.acked += 1;
        self.policy.on_success(now, head.next_hop);
        self.stage = self.policy.stage_after_success(self.stage).min(self.max_stage);
        self.range = self.policy.contention_range(self.stage, now);
        out.push(MacAction::Acked { packet: head.packet, next_hop: head.next_hop, attempts: head.retries + 1 });
        self.start_next(now, out);
    }

    fn on_tx_complete(&mut self, now: SimTime, out: &mut Vec<MacAction>) -> Result<(), MacError> {
        let kind = self.transmitting.take().ok_or_else(|| self.illegal("tx_complete"))?;
        self.idle_since = now;
        match (kind, self.phase) {
            (FrameKind::Data, Phase::TxData) => {
                let head = self.head.expect("head while sending data");
                if head.next_hop.is_broadcast() {
                    self.succeed_attempt(now, out);
                } else {
                    self.phase = Phase::WaitAck;
                    self.wait_since = now;
                    out.push(MacAction::SetTimer(MacTimer::AckTimeout, now + self.timings.ack_timeout(&self.phy)));
                }
            }
            (FrameKind::Rts, Phase::TxRts) => {
                self.phase = Phase::WaitCts;
                self.wait_since = now;
                out.push(MacAction::SetTimer(MacTimer::CtsTimeout, now + self.timings.cts_timeout(&self.phy)));
            }
            (FrameKind::Ack | FrameKind::Cts, _) => self.resume(now, out),
            _ => return Err(self.illegal("tx_complete")),
        }
        Ok(())
    }

    fn respond(&mut self, kind: FrameKind, to: &Frame, now: SimTime, out: &mut Vec<MacAction>) {
        let bounds = self.policy.power_bounds();
        let (nav, tx_power_dbm) = match kind {
            FrameKind::Ack => (SimTime::ZERO, bounds.clamp(to.tx_power_dbm)),
            FrameKind::Cts => {
                (to.nav.saturating_sub(self.timings.sifs() + self.phy.airtime(FrameKind::Cts, 0)), bounds.max_dbm)
            }
            _ => unreachable!("responses are ACK or CTS"),
        };
        self.response = Some(Frame {
            kind,
            src: self.id,
            dst: to.src,
            seq: to.seq,
            payload_bytes: 0,
            tx_power_dbm,
            created_at: now,
            nav,
            packet: None,
        });
        out.push(MacAction::SetTimer(MacTimer::Response, now + self.timings.sifs()));
    }

    fn on_rx(&mut self, rx: RxInfo, now: SimTime, out: &mut Vec<MacAction>) {
        self.policy.observe_decoded(now, &rx);
        let frame = &rx.frame;
        let for_me = frame.dst == self.id;
        match frame.kind {
            FrameKind::Ack if for_me && self.phase == Phase::WaitAck => {
                if self.head.is_some_and(|h| h.seq == frame.seq) {
                    out.push(MacAction::CancelTimer(MacTimer::AckTimeout));
                    self.succeed_attempt(now, out);
                }
            }
            FrameKind::Cts if for_me && self.phase == Phase::WaitCts => {
                out.push(MacAction::CancelTimer(MacTimer::CtsTimeout));
                self.phase = Phase::AwaitSifsData;
                out.push(MacAction::SetTimer(MacTimer::SifsData, now + self.timings.sifs()));
            }
            FrameKind::Data if for_me || frame.dst.is_broadcast() => {
                if for_me && self.transmitting.is_none() {
                    self.respond(FrameKind::Ack, frame, now, out);
                }
                let duplicate = self.last_rx_seq.get(&frame.src) == Some(&frame.seq);
                if duplicate {
                    self.stats.duplicates += 1;
                } else {
                    self.last_rx_seq.insert(frame.src, frame.seq);
                    if let Some(packet) = frame.packet {
                        out.push(MacAction::Deliver { packet, from: frame.src });
                    }
                }
            }
            FrameKind::Rts if for_me => {
                if self.transmitting.is_none() && now >= self.nav_until {
                    self.respond(FrameKind::Cts, frame, now, out);
                }
            }
            FrameKind::Rts | FrameKind::Cts if !for_me => {
                let until = now + frame.nav;
                if until > self.nav_until {
                    self.nav_until = until;
                    self.freeze(now, out);
                    out.push(MacAction::SetTimer(MacTimer::Nav, until));
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, StreamPurpose};

    fn pmax() -> PowerBounds {
        PowerBounds { min_dbm: 10.03, max_dbm: 23.03 }
    }

    fn dcf_mac(id: u32) -> Mac {
        let t = MacTimings::default();
        let policy = DcfPolicy { cw_min: t.cw_min, cw_max: t.cw_max, bounds: pmax() };
        Mac::new(
            NodeId(id),
            t,
            PhyParams::default(),
            Box::new(policy),
            derive_stream(1, NodeId(id), StreamPurpose::Backoff),
        )
    }

    fn packet(id: u64) -> Packet {
        Packet { id, origin: NodeId(0), final_dst: NodeId(1), created_at: SimTime::ZERO, payload_bytes: 2048 }
    }

    fn timer_at(actions: &[MacAction], timer: MacTimer) -> Option<SimTime> {
        actions.iter().find_map(|a| match a {
            MacAction::SetTimer(t, at) if *t == timer => Some(*at),
            _ => None,
        })
    }

    #[test]
    fn beb_ladder() {
        assert_eq!(beb_next_range(0, 15, 1023), CwRange { stage: 0, lower: 0, upper: 15 });
        assert_eq!(beb_next_range(3, 15, 1023).upper, 127);
        assert_eq!(beb_next_range(9, 15, 1023).upper, 1023);
        assert_eq!(beb_next_range(64, 15, 1023).upper, 1023);
        assert_eq!(MacTimings::default().max_stage(), 6);
    }

    #[test]
    fn draws_stay_in_range() {
        let mut rng = derive_stream(3, NodeId(0), StreamPurpose::Backoff);
        assert_eq!(backoff_draw(CwRange { stage: 0, lower: 0, upper: 0 }, &mut rng), 0);
        let r = CwRange { stage: 0, lower: 0, upper: 15 };
        let n = 100_000;
        let sum: u64 = (0..n).map(|_| u64::from(backoff_draw(r, &mut rng))).sum();
        let mean = sum as f64 / n as f64;
        assert!((mean - 7.5).abs() < 0.1, "{mean}");
    }

    #[test]
    fn draws_reproducible() {
        let r = CwRange { stage: 0, lower: 0, upper: 1023 };
        let mut a = derive_stream(3, NodeId(5), StreamPurpose::Backoff);
        let mut b = derive_stream(3, NodeId(5), StreamPurpose::Backoff);
        let xs: Vec<_> = (0..50).map(|_| backoff_draw(r, &mut a)).collect();
        let ys: Vec<_> = (0..50).map(|_| backoff_draw(r, &mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn basic_pc_clamps_and_steps() {
        let b = pmax();
        let p = BasicPcParams::default();
        assert_eq!(basic_pc_adjust(b.max_dbm, AttemptOutcome::Failure, b, p), b.max_dbm);
        assert_eq!(basic_pc_adjust(b.min_dbm, AttemptOutcome::Success, b, p), b.min_dbm);
        let mut x = 15.0;
        for _ in 0..3 {
            x = basic_pc_adjust(x, AttemptOutcome::Success, b, p);
            x = basic_pc_adjust(x, AttemptOutcome::Failure, b, p);
        }
        assert!((x - 18.0).abs() < 1e-12);
    }

    #[test]
    fn idle_enqueue_transmits_after_difs_plus_backoff() {
        let mut mac = dcf_mac(0);
        let t0 = SimTime::from_millis(3);
        let actions = mac.enqueue(packet(1), NodeId(1), t0).unwrap();
        let counter = mac.backoff_state().counter;
        let fire = timer_at(&actions, MacTimer::Backoff).unwrap();
        assert_eq!(fire, t0 + SimTime::from_micros(50 + 20 * u64::from(counter)));
        let out = mac.step(MacInput::Timer(MacTimer::Backoff), fire).unwrap();
        assert!(matches!(&out[..], [MacAction::Transmit(f)] if f.kind == FrameKind::Data));
    }

    #[test]
    fn busy_enqueue_waits_behind_head() {
        let mut mac = dcf_mac(0);
        mac.enqueue(packet(1), NodeId(1), SimTime::ZERO).unwrap();
        let second = mac.enqueue(packet(2), NodeId(1), SimTime::ZERO).unwrap();
        assert!(second.is_empty());
        assert_eq!(mac.queue_len(), 2);
    }

    #[test]
    fn queue_cap_drops() {
        let mut mac = dcf_mac(0);
        for i in 0..50 {
            mac.enqueue(packet(i), NodeId(1), SimTime::ZERO).unwrap();
        }
        assert_eq!(mac.enqueue(packet(50), NodeId(1), SimTime::ZERO), Err(MacError::QueueFull));
        assert_eq!(mac.stats().drops_queue, 1);
    }

    #[test]
    fn countdown_freezes_and_resumes() {
        let mut mac = dcf_mac(0);
        // Force a known counter.
        mac.enqueue(packet(1), NodeId(1), SimTime::ZERO).unwrap();
        mac.counter = 7;
        mac.countdown_from = None;
        let out = mac.step(MacInput::MediumBusy, SimTime::ZERO).unwrap();
        assert!(out.is_empty());
        let idle_at = SimTime::from_micros(1000);
        let out = mac.step(MacInput::MediumIdle, idle_at).unwrap();
        assert_eq!(timer_at(&out, MacTimer::Backoff), Some(idle_at + SimTime::from_micros(50 + 7 * 20)));

        // Busy again after DIFS + 3 slots + a fraction: 3 slots are credited.
        let busy_at = idle_at + SimTime::from_micros(50 + 3 * 20 + 5);
        let out = mac.step(MacInput::MediumBusy, busy_at).unwrap();
        assert_eq!(out, vec![MacAction::CancelTimer(MacTimer::Backoff)]);
        assert_eq!(mac.backoff_state().counter, 4);

        // Busy during DIFS credits nothing.
        let idle2 = busy_at + SimTime::from_micros(500);
        mac.step(MacInput::MediumIdle, idle2).unwrap();
        mac.step(MacInput::MediumBusy, idle2 + SimTime::from_micros(30)).unwrap();
        assert_eq!(mac.backoff_state().counter, 4);
    }

    fn ack_for(frame: &Frame) -> RxInfo {
        RxInfo {
            frame: Frame {
                kind: FrameKind::Ack,
                src: frame.dst,
                dst: frame.src,
                seq: frame.seq,
                payload_bytes: 0,
                tx_power_dbm: frame.tx_power_dbm,
                created_at: SimTime::ZERO,
                nav: SimTime::ZERO,
                packet: None,
            },
            rx_power_dbm: -50.0,
            sinr_db: 40.0,
        }
    }

    fn send_head(mac: &mut Mac, now: SimTime) -> (Frame, SimTime) {
        let fire = now + SimTime::from_micros(50 + 20 * u64::from(mac.backoff_state().counter));
        let out = mac.step(MacInput::Timer(MacTimer::Backoff), fire).unwrap();
        let frame = match &out[..] {
            [MacAction::Transmit(f)] => f.clone(),
            other => panic!("expected transmit, got {other:?}"),
        };
        let end = fire + PhyParams::default().frame_airtime(&frame);
        (frame, end)
    }

    #[test]
    fn ack_resets_stage() {
        let mut mac = dcf_mac(0);
        mac.enqueue(packet(1), NodeId(1), SimTime::ZERO).unwrap();
        let (_, end) = send_head(&mut mac, SimTime::ZERO);
        mac.step(MacInput::TxComplete, end).unwrap();
        let to = end + MacTimings::default().ack_timeout(&PhyParams::default());
        mac.step(MacInput::Timer(MacTimer::AckTimeout), to).unwrap();
        assert_eq!(mac.backoff_state().stage, 1);
        assert_eq!(mac.backoff_state().range.upper, 31);

        let (frame, end) = send_head(&mut mac, to);
        mac.step(MacInput::TxComplete, end).unwrap();
        let out = mac.step(MacInput::RxFrame(ack_for(&frame)), end + SimTime::from_micros(258)).unwrap();
        assert!(out.iter().any(|a| matches!(a, MacAction::Acked { attempts: 2, .. })));
        assert_eq!(mac.backoff_state().stage, 0);
        assert_eq!(mac.backoff_state().range, CwRange { stage: 0, lower: 0, upper: 15 });
    }

    #[test]
    fn retry_limit_drops_and_resets() {
        let mut mac = dcf_mac(0);
        mac.enqueue(packet(1), NodeId(1), SimTime::ZERO).unwrap();
        let mut now = SimTime::ZERO;
        let timeout = MacTimings::default().ack_timeout(&PhyParams::default());
        let mut dropped = false;
        for attempt in 0..=7 {
            let (_, end) = send_head(&mut mac, now);
            mac.step(MacInput::TxComplete, end).unwrap();
            now = end + timeout;
            let out = mac.step(MacInput::Timer(MacTimer::AckTimeout), now).unwrap();
            dropped = out.iter().any(|a| matches!(a, MacAction::Dropped { reason: DropReason::RetryLimit, .. }));
            assert_eq!(dropped, attempt == 7);
            assert!(mac.backoff_state().stage <= 6);
        }
        assert!(dropped);
        assert_eq!(mac.stats().drops_retry, 1);
        assert_eq!(mac.stats().data_attempts, 8);
        assert_eq!(mac.backoff_state().stage, 0);
    }

    #[test]
    fn data_for_me_is_acked_after_sifs_and_delivered_once() {
        let mut rx = dcf_mac(1);
        let mut f = Frame::data_for_test(NodeId(0), NodeId(1), 2048);
        f.packet = Some(packet(9));
        let info = RxInfo { frame: f.clone(), rx_power_dbm: -60.0, sinr_db: 36.0 };
        let t = SimTime::from_millis(1);
        let out = rx.step(MacInput::RxFrame(info.clone()), t).unwrap();
        assert_eq!(timer_at(&out, MacTimer::Response), Some(t + SimTime::from_micros(10)));
        assert!(out.iter().any(|a| matches!(a, MacAction::Deliver { .. })));
        let out = rx.step(MacInput::Timer(MacTimer::Response), t + SimTime::from_micros(10)).unwrap();
        assert!(matches!(&out[..], [MacAction::Transmit(a)] if a.kind == FrameKind::Ack && a.dst == NodeId(0)));
        rx.step(MacInput::TxComplete, t + SimTime::from_micros(258)).unwrap();

        // Retransmission of the same seq: ACKed again, not delivered again.
        let out = rx.step(MacInput::RxFrame(info), t + SimTime::from_millis(1)).unwrap();
        assert!(!out.iter().any(|a| matches!(a, MacAction::Deliver { .. })));
        assert_eq!(rx.stats().duplicates, 1);
    }

    #[test]
    fn unexpected_timer_is_illegal() {
        let mut mac = dcf_mac(0);
        assert!(matches!(
            mac.step(MacInput::Timer(MacTimer::AckTimeout), SimTime::ZERO),
            Err(MacError::IllegalTransition { .. })
        ));
        assert!(mac.step(MacInput::TxComplete, SimTime::ZERO).is_err());
    }
}
