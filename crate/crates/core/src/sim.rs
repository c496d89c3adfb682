//! The simulation world: one channel, one MAC and node stack per node, and
//! the event handler that wires them to the kernel.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::channel::{Channel, ChannelError, Reception, SignalId, VerdictCounts};
use crate::cla::{flow_stats, select_protocol, slot_utilization, ClaAmacPolicy, Recommendation};
use crate::gcp::{
    apply_report, build_report, publish, ApplyOutcome, ApplyParams, GcpReport, GcpScope, LinkObservations,
};
use crate::kernel::{Event, EventId, Kernel, KernelError, SimTime, Traced};
use crate::mac::{
    AccessPolicy, BasicPcPolicy, DcfPolicy, DropReason, Frame, FrameKind, Mac, MacAction, MacError, MacInput, MacTimer,
    Packet, PowerBounds, RxInfo,
};
use crate::metrics::{Death, Delivery};
use crate::node::{
    cbr_tick, compute_routes, move_step, EnergyLedger, MobilitySpec, NodeState, Position, RadioState, RoutingTable,
    TrafficSpec,
};
use crate::rng::{derive_stream, RngStream, StreamPurpose, GLOBAL_STREAM};
use crate::scenario::{Placement, Protocol, Scenario};
use crate::trace::{TraceOptions, Traces};
use crate::NodeId;

#[derive(Debug, Clone)]
pub enum Ev {
    Mac(NodeId, MacTimer),
    TxEnd(NodeId, SignalId),
    /// Carrier-sense re-evaluation after a new signal becomes detectable.
    Sense,
    Traffic(usize),
    EnergyCheck(NodeId),
    GcpTick,
    GcpDeliver(NodeId, Arc<GcpReport>),
    Routing,
    Mobility,
    KbSnapshot,
    SelectorWindow,
}

impl Traced for Ev {
    fn target(&self) -> String {
        match self {
            Ev::Mac(n, _) | Ev::TxEnd(n, _) | Ev::EnergyCheck(n) | Ev::GcpDeliver(n, _) => n.to_string(),
            Ev::Traffic(f) => format!("flow{f}"),
            _ => "world".into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Ev::Mac(_, t) => t.as_str(),
            Ev::TxEnd(..) => "tx_end",
            Ev::Sense => "sense",
            Ev::Traffic(_) => "cbr",
            Ev::EnergyCheck(_) => "energy",
            Ev::GcpTick => "gcp_tick",
            Ev::GcpDeliver(..) => "gcp_deliver",
            Ev::Routing => "routing",
            Ev::Mobility => "mobility",
            Ev::KbSnapshot => "kb_snapshot",
            Ev::SelectorWindow => "selector",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("node {node}: {source}")]
    Mac {
        node: NodeId,
        #[source]
        source: MacError,
    },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeCounters {
    pub collisions: u64,
    pub collisions_rx: u64,
    pub drops: u64,
    pub drops_unroutable: u64,
    pub packets_rx: u64,
    pub lost_on_death: u64,
    pub active: bool,
}

/// Everything a run produces before metrics are derived.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub packets_sent: u64,
    pub deliveries: Vec<Delivery>,
    pub nodes: Vec<NodeCounters>,
    pub deaths: Vec<Death>,
    pub verdicts: VerdictCounts,
    pub recommendations: BTreeMap<Recommendation, u64>,
    pub gcp_reports: u64,
    pub gcp_deliveries: u64,
    pub gcp_stale: u64,
    pub events_processed: u64,
}

pub struct World {
    sc: Arc<Scenario>,
    protocol: Protocol,
    end: SimTime,
    channel: Channel,
    macs: Vec<Mac>,
    nodes: Vec<NodeState>,
    tx_power_w: Vec<f64>,
    timers: Vec<[Option<EventId>; 6]>,
    energy_check: Vec<Option<SimTime>>,
    cs_busy: Vec<bool>,
    last_sense: Option<SimTime>,
    shadow_rng: Vec<RngStream>,
    mobility_rng: Vec<RngStream>,
    flows: Vec<TrafficSpec>,
    routes: RoutingTable,
    obs: Vec<LinkObservations>,
    emissions: Vec<Vec<f64>>,
    next_packet: u64,
    apply_params: ApplyParams,
    pub log: RunLog,
    pub traces: Traces,
}

/// Uniform placement from the scenario's placement stream.
pub fn place_nodes(sc: &Scenario, run_seed: u64) -> Vec<Position> {
    match &sc.placement {
        Placement::Explicit { positions } => positions.clone(),
        Placement::Random { seed } => {
            let mut rng = derive_stream(seed.unwrap_or(run_seed), GLOBAL_STREAM, StreamPurpose::Placement);
            (0..sc.node_count)
                .map(|_| Position::new(rng.uniform_f64(0.0, sc.area_m[0]), rng.uniform_f64(0.0, sc.area_m[1])))
                .collect()
        }
    }
}

fn make_policy(sc: &Scenario, protocol: Protocol, bounds: PowerBounds) -> Box<dyn AccessPolicy> {
    let (cw_min, cw_max) = (sc.mac.cw_min, sc.mac.cw_max);
    match protocol {
        Protocol::Dcf => Box::new(DcfPolicy { cw_min, cw_max, bounds }),
        Protocol::BasicPc => {
            Box::new(BasicPcPolicy { cw_min, cw_max, bounds, params: sc.basic_pc, tx_power_dbm: bounds.max_dbm })
        }
        Protocol::ClaAmac => Box::new(ClaAmacPolicy::new(
            sc.cla.clone(),
            bounds,
            bounds.max_dbm,
            sc.channel.noise_floor_dbm,
            cw_min,
            cw_max,
            sc.mac.max_stage(),
        )),
    }
}

impl World {
    pub fn new(sc: Arc<Scenario>, protocol: Protocol, seed: u64, trace: TraceOptions) -> World {
        let n = sc.node_count as usize;
        let positions = place_nodes(&sc, seed);
        let bounds = PowerBounds { min_dbm: sc.pt_min_dbm(), max_dbm: sc.pt_max_dbm() };
        let macs = (0..n)
            .map(|i| {
                let id = NodeId(i as u32);
                Mac::new(
                    id,
                    sc.mac.clone(),
                    sc.phy.clone(),
                    make_policy(&sc, protocol, bounds),
                    derive_stream(seed, id, StreamPurpose::Backoff),
                )
            })
            .collect();
        let idle_w = sc.energy.idle_w();
        let nodes = positions
            .iter()
            .enumerate()
            .map(|(i, &position)| NodeState {
                id: NodeId(i as u32),
                position,
                waypoint: None,
                energy: EnergyLedger::new(sc.energy.initial_j, idle_w),
                radio_state: RadioState::Idle,
            })
            .collect();
        let flows = sc.flows(&positions);
        let routes = compute_routes(&positions, &vec![bounds.max_dbm; n], &vec![true; n], &sc.channel);
        let apply_params = ApplyParams {
            ttl: SimTime::from_secs_f64(sc.cla.ttl_s),
            sinr_threshold_db: sc.channel.sinr_threshold_db,
            noise_floor_dbm: sc.channel.noise_floor_dbm,
            margin_db: sc.cla.margin_db,
        };
        let mut traces = Traces::new(trace);
        if protocol != Protocol::ClaAmac {
            traces.kb = None;
            traces.gcp = None;
        }
        World {
            end: SimTime::from_secs_f64(sc.sim_time_s),
            channel: Channel::new(sc.channel.clone(), sc.phy.clone(), positions),
            macs,
            nodes,
            tx_power_w: vec![0.0; n],
            timers: vec![[None; 6]; n],
            energy_check: vec![None; n],
            cs_busy: vec![false; n],
            last_sense: None,
            shadow_rng: (0..n).map(|i| derive_stream(seed, NodeId(i as u32), StreamPurpose::Shadowing)).collect(),
            mobility_rng: (0..n).map(|i| derive_stream(seed, NodeId(i as u32), StreamPurpose::Mobility)).collect(),
            flows,
            routes,
            obs: vec![LinkObservations::default(); n],
            emissions: vec![Vec::new(); n],
            next_packet: 0,
            apply_params,
            log: RunLog { nodes: vec![NodeCounters::default(); n], ..RunLog::default() },
            traces,
            sc,
            protocol,
        }
    }

    pub fn end(&self) -> SimTime {
        self.end
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn macs(&self) -> &[Mac] {
        &self.macs
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    pub fn flows(&self) -> &[TrafficSpec] {
        &self.flows
    }

    pub fn routes(&self) -> &RoutingTable {
        &self.routes
    }

    fn alive(&self, node: NodeId) -> bool {
        self.nodes[node.index()].alive()
    }

    fn cla(&self) -> bool {
        self.protocol == Protocol::ClaAmac
    }

    /// Schedules the initial events. Call once before running.
    pub fn bootstrap(&mut self, k: &mut Kernel<Ev>, seed: u64) {
        let jitter = self.sc.jitter_start();
        for (f, flow) in self.flows.iter().enumerate() {
            let mut start = flow.start();
            if jitter {
                let mut rng = derive_stream(seed, flow.src, StreamPurpose::Traffic);
                let offset = rng.uniform_f64(0.0, flow.interval_s);
                start += SimTime::from_secs_f64(offset).min(flow.interval().saturating_sub(SimTime::from_nanos(1)));
            }
            if start < flow.stop(self.end) {
                k.schedule(start, Ev::Traffic(f)).expect("start in the future");
            }
        }
        for i in 0..self.nodes.len() {
            self.schedule_energy_check(k, NodeId(i as u32));
        }
        k.schedule_in(SimTime::from_secs_f64(self.sc.routing_epoch_s), Ev::Routing);
        if let MobilitySpec::RandomWaypoint { update_s, .. } = self.sc.mobility {
            k.schedule_in(SimTime::from_secs_f64(update_s), Ev::Mobility);
        }
        if self.cla() {
            if self.sc.gcp.enabled {
                k.schedule_in(self.sc.gcp.period(), Ev::GcpTick);
            }
            if self.traces.kb.is_some() {
                k.schedule(SimTime::ZERO, Ev::KbSnapshot).expect("t = 0");
            }
            k.schedule_in(SimTime::from_secs_f64(self.sc.cla.selector.window_s), Ev::SelectorWindow);
        }
    }

    pub fn handle(&mut self, k: &mut Kernel<Ev>, ev: &Event<Ev>) -> Result<(), SimError> {
        let now = k.now();
        self.log.events_processed += 1;
        match &ev.payload {
            Ev::Mac(node, timer) => {
                self.timers[node.index()][timer.index()] = None;
                if !self.alive(*node) {
                    return Ok(());
                }
                if matches!(timer, MacTimer::AckTimeout | MacTimer::CtsTimeout) && self.cla() {
                    let mw = self.channel.interference_plus_noise_mw(*node, now);
                    self.macs[node.index()].policy_mut().observe_noise(now, mw);
                }
                self.step(k, *node, MacInput::Timer(*timer))?;
            }
            Ev::TxEnd(node, sid) => {
                let (signal, verdicts) = self.channel.end_transmission(*sid, now)?;
                if self.alive(*node) {
                    self.step(k, *node, MacInput::TxComplete)?;
                }
                for v in &verdicts {
                    self.on_verdict(k, v, &signal.frame, signal.tx_power_dbm)?;
                }
                self.sense(k)?;
            }
            Ev::Sense => self.sense(k)?,
            Ev::Traffic(f) => self.emit(k, *f)?,
            Ev::EnergyCheck(node) => {
                let i = node.index();
                if self.energy_check[i] == Some(now) {
                    self.energy_check[i] = None;
                }
                if self.alive(*node) {
                    if let Some(at) = self.nodes[i].energy.advance(now) {
                        self.kill(k, *node, at)?;
                    } else {
                        self.schedule_energy_check(k, *node);
                    }
                }
            }
            Ev::GcpTick => {
                self.gcp_tick(k)?;
                k.schedule_in(self.sc.gcp.period(), Ev::GcpTick);
            }
            Ev::GcpDeliver(node, report) => self.gcp_deliver(*node, report, now),
            Ev::Routing => {
                self.recompute_routes();
                k.schedule_in(SimTime::from_secs_f64(self.sc.routing_epoch_s), Ev::Routing);
            }
            Ev::Mobility => {
                if let MobilitySpec::RandomWaypoint { update_s, .. } = self.sc.mobility {
                    let area = (self.sc.area_m[0], self.sc.area_m[1]);
                    for i in 0..self.nodes.len() {
                        if !self.nodes[i].alive() {
                            continue;
                        }
                        let n = &mut self.nodes[i];
                        n.position = move_step(
                            n.position,
                            &mut n.waypoint,
                            &self.sc.mobility,
                            area,
                            update_s,
                            &mut self.mobility_rng[i],
                        );
                        self.channel.set_position(n.id, n.position);
                    }
                    k.schedule_in(SimTime::from_secs_f64(update_s), Ev::Mobility);
                }
            }
            Ev::KbSnapshot => {
                self.kb_snapshot(now);
                k.schedule_in(SimTime::from_secs_f64(self.sc.kb_snapshot_period_s), Ev::KbSnapshot);
            }
            Ev::SelectorWindow => {
                let window_s = self.sc.cla.selector.window_s;
                for i in 0..self.nodes.len() {
                    let times = std::mem::take(&mut self.emissions[i]);
                    let Some(flow) = self.flows.iter().find(|f| f.src.index() == i) else { continue };
                    if let Some(stats) = flow_stats(&times, flow.payload_bytes, window_s, flow.realtime) {
                        let rec = select_protocol(&stats, &self.sc.cla.selector);
                        *self.log.recommendations.entry(rec).or_default() += 1;
                    }
                }
                k.schedule_in(SimTime::from_secs_f64(window_s), Ev::SelectorWindow);
            }
        }
        self.refresh_energy(k)?;
        Ok(())
    }

    fn step(&mut self, k: &mut Kernel<Ev>, node: NodeId, input: MacInput) -> Result<(), SimError> {
        let now = k.now();
        let label = input.label();
        let actions = self.macs[node.index()].step(input, now).map_err(|source| SimError::Mac { node, source })?;
        if let Some(t) = self.traces.mac.as_mut() {
            let mac = &self.macs[node.index()];
            let b = mac.backoff_state();
            t.row(format_args!(
                "{},{},{},{},{},{:.3},",
                now.as_nanos(),
                node,
                label,
                b.stage,
                b.counter,
                mac.current_power_dbm(now)
            ));
        }
        self.apply(k, node, actions)
    }

    fn apply(&mut self, k: &mut Kernel<Ev>, node: NodeId, actions: Vec<MacAction>) -> Result<(), SimError> {
        let i = node.index();
        for action in actions {
            match action {
                MacAction::Transmit(frame) => self.transmit(k, node, frame)?,
                MacAction::SetTimer(t, at) => {
                    if let Some(id) = self.timers[i][t.index()].take() {
                        k.cancel(id);
                    }
                    let id = k.schedule(at, Ev::Mac(node, t)).expect("MAC timers lie ahead");
                    self.timers[i][t.index()] = Some(id);
                }
                MacAction::CancelTimer(t) => {
                    if let Some(id) = self.timers[i][t.index()].take() {
                        k.cancel(id);
                    }
                }
                MacAction::Deliver { packet, .. } => {
                    if packet.final_dst == node {
                        self.log.nodes[i].packets_rx += 1;
                        self.log.deliveries.push(Delivery {
                            packet: packet.id,
                            at: k.now(),
                            created_at: packet.created_at,
                            payload_bytes: packet.payload_bytes,
                        });
                    } else {
                        self.forward(k, node, packet)?;
                    }
                }
                MacAction::Acked { .. } => {}
                MacAction::Dropped { reason, .. } => {
                    self.log.nodes[i].drops += 1;
                    if reason == DropReason::Unroutable {
                        self.log.nodes[i].drops_unroutable += 1;
                    }
                }
            }
        }
        Ok(())
    }

    fn transmit(&mut self, k: &mut Kernel<Ev>, node: NodeId, frame: Frame) -> Result<(), SimError> {
        let now = k.now();
        let i = node.index();
        self.log.nodes[i].active = true;
        let airtime = self.sc.phy.frame_airtime(&frame);
        let power = frame.tx_power_dbm;
        self.tx_power_w[i] = self.sc.energy.tx_w(power);
        let (sid, verdicts) = self.channel.begin_transmission(frame, node, power, now, &mut self.shadow_rng[i])?;
        k.schedule_in(airtime, Ev::TxEnd(node, sid));
        let sense_at = now + self.sc.phy.cca_delay();
        if self.last_sense != Some(sense_at) {
            self.last_sense = Some(sense_at);
            k.schedule(sense_at, Ev::Sense).expect("sense lies ahead");
        }
        for v in &verdicts {
            let signal = self.channel.signal(v.signal).expect("verdicts at start refer to live signals");
            let (frame, tx_dbm) = (signal.frame.clone(), signal.tx_power_dbm);
            self.on_verdict(k, v, &frame, tx_dbm)?;
        }
        Ok(())
    }

    fn on_verdict(&mut self, k: &mut Kernel<Ev>, v: &Reception, frame: &Frame, tx_dbm: f64) -> Result<(), SimError> {
        self.log.verdicts.add(v.outcome);
        let r = v.receiver.index();
        if v.outcome.is_collision() && frame.dst == v.receiver {
            self.log.nodes[r].collisions_rx += 1;
            if frame.kind == FrameKind::Data {
                self.log.nodes[frame.src.index()].collisions += 1;
            }
        }
        if frame.kind == FrameKind::Data && frame.dst == v.receiver {
            if let Some(t) = self.traces.mac.as_mut() {
                t.row(format_args!(
                    "{},{},verdict,,,{:.3},{}",
                    k.now().as_nanos(),
                    v.receiver,
                    tx_dbm,
                    v.outcome.as_str()
                ));
            }
        }
        if v.outcome != crate::channel::ReceptionOutcome::Decoded || !self.alive(v.receiver) {
            return Ok(());
        }
        self.log.nodes[r].active = true;
        let sinr_db = v.sinr_db.unwrap_or(f64::INFINITY);
        if self.cla() {
            self.obs[r].observe(frame.src, v.rx_power_dbm, tx_dbm, sinr_db);
        }
        let info = RxInfo { frame: frame.clone(), rx_power_dbm: v.rx_power_dbm, sinr_db };
        self.step(k, v.receiver, MacInput::RxFrame(info))
    }

    /// Re-evaluates energy-detect carrier sense at every live node.
    fn sense(&mut self, k: &mut Kernel<Ev>) -> Result<(), SimError> {
        let now = k.now();
        let cla = self.cla();
        for i in 0..self.nodes.len() {
            if !self.nodes[i].alive() {
                continue;
            }
            let node = NodeId(i as u32);
            if cla {
                let mw = self.channel.interference_plus_noise_mw(node, now);
                self.macs[i].policy_mut().observe_noise(now, mw);
            }
            let busy = self.channel.energy_busy(node, now);
            if busy != self.cs_busy[i] {
                self.cs_busy[i] = busy;
                let input = if busy { MacInput::MediumBusy } else { MacInput::MediumIdle };
                self.step(k, node, input)?;
            }
        }
        Ok(())
    }

    fn emit(&mut self, k: &mut Kernel<Ev>, f: usize) -> Result<(), SimError> {
        let now = k.now();
        let flow = self.flows[f].clone();
        if !self.alive(flow.src) {
            return Ok(());
        }
        self.log.packets_sent += 1;
        self.emissions[flow.src.index()].push(now.as_secs_f64());
        let packet = Packet {
            id: self.next_packet,
            origin: flow.src,
            final_dst: flow.dst,
            created_at: now,
            payload_bytes: flow.payload_bytes,
        };
        self.next_packet += 1;
        self.forward(k, flow.src, packet)?;
        if let Some(next) = cbr_tick(flow.interval(), flow.stop(self.end), now) {
            k.schedule(next, Ev::Traffic(f)).expect("next emission lies ahead");
        }
        Ok(())
    }

    fn forward(&mut self, k: &mut Kernel<Ev>, node: NodeId, packet: Packet) -> Result<(), SimError> {
        let i = node.index();
        let Some(hop) = self.routes.next_hop(node, packet.final_dst) else {
            self.log.nodes[i].drops += 1;
            self.log.nodes[i].drops_unroutable += 1;
            return Ok(());
        };
        match self.macs[i].enqueue(packet, hop, k.now()) {
            Ok(actions) => self.apply(k, node, actions),
            Err(_) => {
                self.log.nodes[i].drops += 1;
                Ok(())
            }
        }
    }

    fn recompute_routes(&mut self) {
        let positions: Vec<Position> = self.nodes.iter().map(|n| n.position).collect();
        let alive: Vec<bool> = self.nodes.iter().map(|n| n.alive()).collect();
        let powers = vec![self.sc.pt_max_dbm(); self.nodes.len()];
        self.routes = compute_routes(&positions, &powers, &alive, &self.sc.channel);
    }

    fn viable_flows(&self) -> usize {
        self.flows
            .iter()
            .filter(|f| self.alive(f.src) && self.alive(f.dst) && self.routes.path(f.src, f.dst).is_some())
            .count()
    }

    fn kill(&mut self, k: &mut Kernel<Ev>, node: NodeId, at: SimTime) -> Result<(), SimError> {
        let i = node.index();
        if let Some(v) = self.channel.kill(node) {
            let signal = self.channel.signal(v.signal).expect("locked signal is live");
            let (frame, tx_dbm) = (signal.frame.clone(), signal.tx_power_dbm);
            self.on_verdict(k, &v, &frame, tx_dbm)?;
        }
        for slot in self.timers[i].iter_mut() {
            if let Some(id) = slot.take() {
                k.cancel(id);
            }
        }
        self.log.nodes[i].lost_on_death += self.macs[i].flush().len() as u64;
        self.recompute_routes();
        self.log.deaths.push(Death { node, at, active: self.log.nodes[i].active, viable_flows: self.viable_flows() });
        log::debug!("node {node} died at {at}");
        Ok(())
    }

    fn schedule_energy_check(&mut self, k: &mut Kernel<Ev>, node: NodeId) {
        let i = node.index();
        let Some(at) = self.nodes[i].energy.projected_death() else { return };
        let at = at.max(k.now());
        if self.energy_check[i].is_none_or(|s| at < s) {
            self.energy_check[i] = Some(at);
            k.schedule(at, Ev::EnergyCheck(node)).expect("not in the past");
        }
    }

    /// Brings every ledger's draw in line with the radio's current activity.
    fn refresh_energy(&mut self, k: &mut Kernel<Ev>) -> Result<(), SimError> {
        let now = k.now();
        for i in 0..self.nodes.len() {
            if !self.nodes[i].alive() {
                continue;
            }
            let node = NodeId(i as u32);
            let (state, w) = if self.channel.is_transmitting(node) {
                (RadioState::Tx, self.tx_power_w[i])
            } else if self.channel.is_receiving(node) {
                (RadioState::Rx, self.sc.energy.rx_w())
            } else {
                (RadioState::Idle, self.sc.energy.idle_w())
            };
            let ledger = &mut self.nodes[i].energy;
            if ledger.state == state && ledger.power_w == w {
                continue;
            }
            self.nodes[i].radio_state = state;
            if let Some(at) = self.nodes[i].energy.set_state(now, state, w) {
                self.kill(k, node, at)?;
            } else {
                self.schedule_energy_check(k, node);
            }
        }
        Ok(())
    }

    fn gcp_tick(&mut self, k: &mut Kernel<Ev>) -> Result<(), SimError> {
        let now = k.now();
        let n = self.nodes.len();
        let pt_max = self.sc.pt_max_dbm();
        for i in 0..n {
            let origin = NodeId(i as u32);
            if !self.alive(origin) {
                continue;
            }
            let mac = &self.macs[i];
            let slot_util = mac.policy().knowledge().map_or(0.0, |kb| slot_utilization(&kb.slot_window));
            let report = Arc::new(build_report(origin, &self.obs[i], mac.current_power_dbm(now), slot_util, now));
            self.obs[i].clear();
            let recipients: Vec<NodeId> = (0..n)
                .map(|j| NodeId(j as u32))
                .filter(|&j| self.alive(j))
                .filter(|&j| match self.sc.gcp.scope {
                    GcpScope::Network => true,
                    GcpScope::OneHop => {
                        let d = self.nodes[i].position.distance(self.nodes[j.index()].position);
                        crate::channel::mean_rx_power_dbm(pt_max, d, &self.sc.channel)
                            >= self.sc.channel.required_rx_dbm()
                    }
                })
                .collect();
            let receipt = publish(&report, &self.sc.gcp, recipients, k, |to| Ev::GcpDeliver(to, Arc::clone(&report)));
            self.log.gcp_reports += 1;
            self.log.gcp_deliveries += receipt.deliveries as u64;
            if let Some(at) = self.nodes[i].energy.debit(now, receipt.energy_j) {
                self.kill(k, origin, at)?;
            } else {
                self.schedule_energy_check(k, origin);
            }
        }
        Ok(())
    }

    fn gcp_deliver(&mut self, node: NodeId, report: &GcpReport, now: SimTime) {
        if !self.alive(node) {
            return;
        }
        let Some(kb) = self.macs[node.index()].policy_mut().knowledge_mut() else { return };
        let outcome = apply_report(kb, node, report, now, &self.apply_params);
        if outcome == ApplyOutcome::Stale {
            self.log.gcp_stale += 1;
        }
        if let Some(t) = self.traces.gcp.as_mut() {
            t.row(format_args!(
                "{},{},{},{},{},{:.3},{}",
                now.as_nanos(),
                report.origin,
                node,
                report.issued_at.as_nanos(),
                report.heard.len(),
                report.tx_power_dbm,
                if outcome == ApplyOutcome::Applied { "applied" } else { "stale" }
            ));
        }
    }

    fn kb_snapshot(&mut self, now: SimTime) {
        let Some(t) = self.traces.kb.as_mut() else { return };
        for (i, mac) in self.macs.iter().enumerate() {
            if !self.nodes[i].alive() {
                continue;
            }
            let Some(kb) = mac.policy().knowledge() else { continue };
            let horizon = SimTime::from_secs_f64(self.sc.cla.horizon_s);
            t.row(format_args!(
                "{},{},{:.6},{:.4},{},{:.3}",
                now.as_nanos(),
                i,
                kb.collision_ewma,
                slot_utilization(&kb.slot_window),
                crate::cla::estimate_active_neighbors(&kb.decode_log, now, horizon),
                mac.current_power_dbm(now)
            ));
        }
    }

    /// Accrues energy up to the end of the run.
    pub fn finish(&mut self, k: &mut Kernel<Ev>) -> Result<(), SimError> {
        let end = self.end;
        for i in 0..self.nodes.len() {
            if self.nodes[i].alive() {
                if let Some(at) = self.nodes[i].energy.advance(end) {
                    self.kill(k, NodeId(i as u32), at)?;
                }
            }
        }
        Ok(())
    }
}

/// Runs a world to completion.
pub fn simulate(
    sc: Arc<Scenario>,
    protocol: Protocol,
    seed: u64,
    trace: TraceOptions,
) -> Result<World, KernelError<SimError>> {
    let mut world = World::new(sc, protocol, seed, trace);
    let mut k: Kernel<Ev> = Kernel::new();
    let event_log = SharedBuf::default();
    if trace.events {
        k.set_event_log(Box::new(event_log.clone()));
    }
    world.bootstrap(&mut k, seed);
    let end = world.end();
    k.run_until(end, |k, ev| world.handle(k, ev))?;
    world.finish(&mut k).map_err(|source| KernelError::Handler {
        event: crate::kernel::EventIdentity { fire_at: end, seq: u64::MAX, target: "world".into(), kind: "finish" },
        source,
    })?;
    drop(k.take_event_log());
    if trace.events {
        world.traces.events = Some(event_log.take());
    }
    Ok(world)
}

/// In-memory sink for the kernel event log.
#[derive(Debug, Clone, Default)]
struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl SharedBuf {
    fn take(&self) -> Vec<u8> {
        std::mem::take(&mut *self.0.lock().expect("event log lock"))
    }
}

impl std::io::Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().expect("event log lock").extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
