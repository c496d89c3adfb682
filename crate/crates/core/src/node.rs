//! Per-node plumbing around the MAC: positions and mobility, CBR sources,
//! the energy ledger, and min-hop routing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::channel::{mean_rx_power_dbm, ChannelParams};
use crate::kernel::SimTime;
use crate::rng::RngStream;
use crate::units::dbm_to_watts;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Position {
        Position { x, y }
    }

    pub fn distance(self, other: Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RadioState {
    Tx,
    Rx,
    Idle,
}

impl RadioState {
    pub const ALL: [RadioState; 3] = [RadioState::Tx, RadioState::Rx, RadioState::Idle];

    fn index(self) -> usize {
        match self {
            RadioState::Tx => 0,
            RadioState::Rx => 1,
            RadioState::Idle => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    pub src: NodeId,
    pub dst: NodeId,
    pub payload_bytes: u32,
    pub interval_s: f64,
    pub start_s: f64,
    /// Defaults to the end of the run.
    #[serde(default)]
    pub stop_s: Option<f64>,
    #[serde(default)]
    pub realtime: bool,
}

impl TrafficSpec {
    pub fn interval(&self) -> SimTime {
        SimTime::from_secs_f64(self.interval_s)
    }

    pub fn start(&self) -> SimTime {
        SimTime::from_secs_f64(self.start_s)
    }

    pub fn stop(&self, sim_end: SimTime) -> SimTime {
        self.stop_s.map_or(sim_end, SimTime::from_secs_f64).min(sim_end)
    }
}

/// Next emission after one at `now`, or `None` once it would reach `stop`.
pub fn cbr_tick(interval: SimTime, stop: SimTime, now: SimTime) -> Option<SimTime> {
    let next = now + interval;
    (next < stop).then_some(next)
}

/// Emissions in `[start, stop)`.
pub fn cbr_emission_count(interval: SimTime, start: SimTime, stop: SimTime) -> u64 {
    if stop <= start {
        0
    } else {
        (stop - start).as_nanos().div_ceil(interval.as_nanos())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum MobilitySpec {
    #[default]
    Static,
    RandomWaypoint {
        min_speed_mps: f64,
        max_speed_mps: f64,
        update_s: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub target: Position,
    pub speed_mps: f64,
}

fn draw_waypoint(area: (f64, f64), min_speed: f64, max_speed: f64, rng: &mut RngStream) -> Waypoint {
    Waypoint {
        target: Position::new(rng.uniform_f64(0.0, area.0), rng.uniform_f64(0.0, area.1)),
        speed_mps: rng.uniform_f64(min_speed, max_speed),
    }
}

fn reflect(v: f64, hi: f64) -> f64 {
    if hi <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * hi;
    let m = v.rem_euclid(period);
    if m > hi {
        period - m
    } else {
        m
    }
}

/// Advances a node by `dt`. Arriving at the waypoint mid-step draws the next
/// one and spends the rest of the step travelling toward it.
pub fn move_step(
    pos: Position,
    waypoint: &mut Option<Waypoint>,
    spec: &MobilitySpec,
    area: (f64, f64),
    dt_s: f64,
    rng: &mut RngStream,
) -> Position {
    let MobilitySpec::RandomWaypoint { min_speed_mps, max_speed_mps, .. } = *spec else {
        return pos;
    };
    let mut pos = pos;
    let mut left = dt_s;
    // Bounded so a zero-speed draw cannot spin forever.
    for _ in 0..64 {
        if left <= 0.0 {
            break;
        }
        let wp = *waypoint.get_or_insert_with(|| draw_waypoint(area, min_speed_mps, max_speed_mps, rng));
        if wp.speed_mps <= 0.0 {
            break;
        }
        let d = pos.distance(wp.target);
        let reach = wp.speed_mps * left;
        if reach < d {
            let f = reach / d;
            pos = Position::new(pos.x + (wp.target.x - pos.x) * f, pos.y + (wp.target.y - pos.y) * f);
            left = 0.0;
        } else {
            pos = wp.target;
            left -= d / wp.speed_mps;
            *waypoint = None;
        }
    }
    Position::new(reflect(pos.x, area.0), reflect(pos.y, area.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub initial_j: f64,
    pub pt_max_w: f64,
    pub pt_min_w: f64,
    pub rx_fraction: f64,
    pub idle_fraction: f64,
    pub pa_efficiency: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            initial_j: 5.0,
            pt_max_w: 0.200888,
            pt_min_w: 0.010072,
            rx_fraction: 0.45,
            idle_fraction: 0.30,
            pa_efficiency: 1.0,
        }
    }
}

impl EnergyConfig {
    pub fn rx_w(&self) -> f64 {
        self.rx_fraction * self.pt_max_w
    }

    pub fn idle_w(&self) -> f64 {
        self.idle_fraction * self.pt_max_w
    }

    pub fn tx_w(&self, radiated_dbm: f64) -> f64 {
        dbm_to_watts(radiated_dbm) / self.pa_efficiency
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.initial_j > 0.0) {
            return Err("initial_j must be > 0".into());
        }
        if !(self.pt_min_w > 0.0 && self.pt_min_w <= self.pt_max_w) {
            return Err("require 0 < pt_min_w <= pt_max_w".into());
        }
        if !(self.rx_fraction > 0.0 && self.idle_fraction > 0.0) {
            return Err("rx_fraction and idle_fraction must be > 0".into());
        }
        if !(self.pa_efficiency > 0.0 && self.pa_efficiency <= 1.0) {
            return Err("pa_efficiency must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Drains `power_w` for `dt_s` from `energy_j`. When the budget runs out
/// inside the interval, returns the offset at which it hit zero.
pub fn energy_elapse(energy_j: f64, power_w: f64, dt_s: f64) -> (f64, Option<f64>) {
    let need = power_w * dt_s;
    if need < energy_j {
        (energy_j - need, None)
    } else if power_w > 0.0 {
        (0.0, Some(energy_j / power_w))
    } else {
        (energy_j, None)
    }
}

/// Residual below which a node counts as depleted; absorbs float dust.
pub const DEPLETED_J: f64 = 1e-12;

/// Tracks one node's energy with piecewise-constant power draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub initial_j: f64,
    pub remaining_j: f64,
    pub state: RadioState,
    pub power_w: f64,
    pub since: SimTime,
    /// Joules and seconds spent per radio state, indexed TX, RX, IDLE.
    pub state_j: [f64; 3],
    pub state_s: [f64; 3],
    pub gcp_j: f64,
    pub gcp_reports: u64,
    pub died_at: Option<SimTime>,
}

impl EnergyLedger {
    pub fn new(initial_j: f64, idle_w: f64) -> EnergyLedger {
        EnergyLedger {
            initial_j,
            remaining_j: initial_j,
            state: RadioState::Idle,
            power_w: idle_w,
            since: SimTime::ZERO,
            state_j: [0.0; 3],
            state_s: [0.0; 3],
            gcp_j: 0.0,
            gcp_reports: 0,
            died_at: None,
        }
    }

    pub fn alive(&self) -> bool {
        self.died_at.is_none()
    }

    /// Accrues draw up to `now`. Returns the death instant if it lies in `(since, now]`.
    pub fn advance(&mut self, now: SimTime) -> Option<SimTime> {
        if !self.alive() || now <= self.since {
            return None;
        }
        let dt = (now - self.since).as_secs_f64();
        let (rest, died) = energy_elapse(self.remaining_j, self.power_w, dt);
        let i = self.state.index();
        match died {
            None => {
                self.state_j[i] += self.power_w * dt;
                self.state_s[i] += dt;
                self.remaining_j = rest;
                self.since = now;
                if self.remaining_j <= DEPLETED_J {
                    self.died_at = Some(now);
                }
            }
            Some(offset) => {
                self.state_j[i] += self.remaining_j;
                self.state_s[i] += offset;
                self.remaining_j = 0.0;
                let at = (self.since + SimTime::from_secs_f64(offset)).min(now);
                self.since = at;
                self.died_at = Some(at);
            }
        }
        self.died_at
    }

    /// Switches the draw at `now`; accrues the previous state first.
    pub fn set_state(&mut self, now: SimTime, state: RadioState, power_w: f64) -> Option<SimTime> {
        let died = self.advance(now);
        if died.is_none() {
            self.state = state;
            self.power_w = power_w;
        }
        died
    }

    /// One-off debit such as a control report. Returns the death instant if drained.
    pub fn debit(&mut self, now: SimTime, joules: f64) -> Option<SimTime> {
        if let Some(d) = self.advance(now) {
            return Some(d);
        }
        let taken = joules.min(self.remaining_j);
        self.remaining_j -= taken;
        self.gcp_j += taken;
        self.gcp_reports += 1;
        if self.remaining_j <= DEPLETED_J {
            self.died_at = Some(now);
        }
        self.died_at
    }

    /// Instant the battery empties if the current draw continues.
    pub fn projected_death(&self) -> Option<SimTime> {
        if !self.alive() || self.power_w <= 0.0 {
            return None;
        }
        // Rounded up so the check never lands before depletion.
        let ns = (self.remaining_j / self.power_w * 1e9).ceil();
        let dt = if ns >= u64::MAX as f64 { SimTime::MAX } else { SimTime::from_nanos((ns as u64).max(1)) };
        Some(self.since.saturating_add(dt))
    }

    pub fn consumed_j(&self) -> f64 {
        self.initial_j - self.remaining_j
    }

    /// Σ state energy + control debits; equals `consumed_j` when the books balance.
    pub fn accounted_j(&self) -> f64 {
        self.state_j.iter().sum::<f64>() + self.gcp_j
    }
}

/// Next hop towards every destination, per source. `None` = unreachable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTable {
    next: Vec<Vec<Option<NodeId>>>,
}

impl RoutingTable {
    pub fn next_hop(&self, src: NodeId, dst: NodeId) -> Option<NodeId> {
        self.next.get(src.index()).and_then(|row| row.get(dst.index()).copied().flatten())
    }

    pub fn node_count(&self) -> usize {
        self.next.len()
    }

    /// Walks next hops from `src`; `None` if unreachable.
    pub fn path(&self, src: NodeId, dst: NodeId) -> Option<Vec<NodeId>> {
        let mut path = vec![src];
        let mut cur = src;
        while cur != dst {
            cur = self.next_hop(cur, dst)?;
            if path.len() > self.next.len() {
                return None;
            }
            path.push(cur);
        }
        Some(path)
    }
}

/// Min-hop routes over links whose mean received power clears the decode
/// requirement. Ties go to the lowest next-hop id.
pub fn compute_routes(
    positions: &[Position],
    tx_powers_dbm: &[f64],
    alive: &[bool],
    params: &ChannelParams,
) -> RoutingTable {
    let n = positions.len();
    let required = params.required_rx_dbm();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|a| {
            (0..n)
                .filter(|&b| {
                    a != b
                        && alive[a]
                        && alive[b]
                        && mean_rx_power_dbm(tx_powers_dbm[a], positions[a].distance(positions[b]), params) >= required
                })
                .collect()
        })
        .collect();
    // hops[s][d]: min hop count from s to d.
    let hops: Vec<Vec<Option<u32>>> = (0..n)
        .map(|s| {
            let mut dist = vec![None; n];
            if !alive[s] {
                return dist;
            }
            dist[s] = Some(0);
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                let du = dist[u].expect("visited");
                for &v in &adj[u] {
                    if dist[v].is_none() {
                        dist[v] = Some(du + 1);
                        q.push_back(v);
                    }
                }
            }
            dist
        })
        .collect();
    let next = (0..n)
        .map(|s| {
            (0..n)
                .map(|d| {
                    let h = hops[s][d].filter(|&h| h > 0)?;
                    adj[s].iter().copied().find(|&v| hops[v][d] == Some(h - 1)).map(|v| NodeId(v as u32))
                })
                .collect()
        })
        .collect();
    RoutingTable { next }
}

/// Mutable per-node state outside the MAC.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub position: Position,
    pub waypoint: Option<Waypoint>,
    pub energy: EnergyLedger,
    pub radio_state: RadioState,
}

impl NodeState {
    pub fn alive(&self) -> bool {
        self.energy.alive()
    }
}
