//! Discrete-event kernel: integer-nanosecond clock, a `(fire_at, seq)` ordered
//! event queue with cancellation, and bounded run control.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::io::Write;
use std::ops::{Add, AddAssign, Mul, Sub};
use std::panic::{self, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

/// Simulated time in integer nanoseconds since the start of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }

    /// Converts a configuration value in seconds, rounding to the nearest nanosecond.
    /// Only used at the scenario boundary; all simulation arithmetic stays integral.
    pub fn from_secs_f64(s: f64) -> Self {
        if !s.is_finite() || s >= u64::MAX as f64 / 1e9 {
            return SimTime::MAX;
        }
        SimTime((s.max(0.0) * 1e9).round() as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 * 1e-3
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn saturating_add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl Mul<u64> for SimTime {
    type Output = SimTime;
    fn mul(self, rhs: u64) -> SimTime {
        SimTime(self.0 * rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:09}s", self.0 / 1_000_000_000, self.0 % 1_000_000_000)
    }
}

/// Handle returned by [`Kernel::schedule`]; cancels exactly one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(u64);

impl EventId {
    pub fn seq(self) -> u64 {
        self.0
    }
}

/// Identification used by the event log and by handler failure reports.
pub trait Traced {
    /// Module or node the event is addressed to.
    fn target(&self) -> String;
    /// Short event-kind label.
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone)]
pub struct Event<E> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: E,
}

struct Entry<E>(Event<E>);

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_at == other.0.fire_at && self.0.seq == other.0.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.0.fire_at, self.0.seq).cmp(&(other.0.fire_at, other.0.seq))
    }
}

/// Identity of an event that failed inside a handler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventIdentity {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: String,
    pub kind: &'static str,
}

impl fmt::Display for EventIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event #{} ({} -> {}) at {}", self.seq, self.kind, self.target, self.fire_at)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KernelError<H: std::error::Error + 'static> {
    #[error("run_until called while the kernel is already running")]
    AlreadyRunning,
    #[error("handler failed on {event}")]
    Handler {
        event: EventIdentity,
        #[source]
        source: H,
    },
    #[error("handler panicked on {event}: {message}")]
    HandlerPanic { event: EventIdentity, message: String },
    #[error("event log write failed")]
    Log(#[from] std::io::Error),
}

/// Error type for scheduling outside of `run_until`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("cannot schedule at {at}: clock is already at {now}")]
pub struct PastTime {
    pub at: SimTime,
    pub now: SimTime,
}

pub struct Kernel<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Entry<E>>>,
    pending: HashSet<u64>,
    running: bool,
    log: Option<Box<dyn Write + Send>>,
}

impl<E> Default for Kernel<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Kernel<E> {
    pub fn new() -> Self {
        Kernel {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            pending: HashSet::new(),
            running: false,
            log: None,
        }
    }

    /// Enables the tab-separated `tick seq target kind` event log.
    pub fn set_event_log(&mut self, sink: Box<dyn Write + Send>) {
        self.log = Some(sink);
    }

    pub fn take_event_log(&mut self) -> Option<Box<dyn Write + Send>> {
        self.log.take()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: E) -> Result<EventId, PastTime> {
        if fire_at < self.now {
            return Err(PastTime { at: fire_at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(seq);
        self.queue.push(Reverse(Entry(Event { fire_at, seq, payload })));
        Ok(EventId(seq))
    }

    /// Schedules `delay` after the current clock. Never fails.
    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> EventId {
        let at = self.now.saturating_add(delay);
        self.schedule(at, payload).expect("relative schedule cannot be in the past")
    }

    /// Returns true iff the event was still pending. Cancelled events never fire.
    pub fn cancel(&mut self, id: EventId) -> bool {
        self.pending.remove(&id.0)
    }

    pub fn is_pending(&self, id: EventId) -> bool {
        self.pending.contains(&id.0)
    }

    fn pop_due(&mut self, t_end: SimTime) -> Option<Event<E>> {
        loop {
            let head = self.queue.peek()?;
            if head.0 .0.fire_at > t_end {
                return None;
            }
            let Reverse(Entry(ev)) = self.queue.pop().expect("peeked");
            if self.pending.remove(&ev.seq) {
                return Some(ev);
            }
        }
    }
}

impl<E: Traced> Kernel<E> {
    /// Processes every event with `fire_at <= t_end` in `(fire_at, seq)` order,
    /// then leaves the clock at `t_end`.
    pub fn run_until<H, F>(&mut self, t_end: SimTime, mut handler: F) -> Result<u64, KernelError<H>>
    where
        H: std::error::Error + 'static,
        F: FnMut(&mut Kernel<E>, &Event<E>) -> Result<(), H>,
    {
        if self.running {
            return Err(KernelError::AlreadyRunning);
        }
        self.running = true;
        let result = self.drain(t_end, &mut handler);
        self.running = false;
        let processed = result?;
        if t_end > self.now {
            self.now = t_end;
        }
        Ok(processed)
    }

    fn drain<H, F>(&mut self, t_end: SimTime, handler: &mut F) -> Result<u64, KernelError<H>>
    where
        H: std::error::Error + 'static,
        F: FnMut(&mut Kernel<E>, &Event<E>) -> Result<(), H>,
    {
        let mut processed = 0u64;
        while let Some(ev) = self.pop_due(t_end) {
            debug_assert!(ev.fire_at >= self.now);
            self.now = ev.fire_at;
            if let Some(log) = self.log.as_mut() {
                writeln!(log, "{}\t{}\t{}\t{}", ev.fire_at.as_nanos(), ev.seq, ev.payload.target(), ev.payload.kind())?;
            }
            let outcome = panic::catch_unwind(AssertUnwindSafe(|| handler(self, &ev)));
            let identity = || EventIdentity {
                fire_at: ev.fire_at,
                seq: ev.seq,
                target: ev.payload.target(),
                kind: ev.payload.kind(),
            };
            match outcome {
                Ok(Ok(())) => {}
                Ok(Err(source)) => return Err(KernelError::Handler { event: identity(), source }),
                Err(payload) => {
                    let message = payload
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| payload.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "non-string panic payload".into());
                    return Err(KernelError::HandlerPanic { event: identity(), message });
                }
            }
            processed += 1;
        }
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        Ok(processed)
    }
}
