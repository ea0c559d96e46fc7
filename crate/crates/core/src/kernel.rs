//! Deterministic discrete-event kernel.
//!
//! A simulated clock in real-valued milliseconds, a priority queue ordered by
//! `(fire_at, seq)` and seeded, named random substreams.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in milliseconds. Used both for instants and durations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Panics if `ms` is negative or NaN.
    pub fn from_ms(ms: f64) -> Self {
        assert!(ms >= 0.0, "simulated time must be a nonnegative number, got {ms}");
        SimTime(ms)
    }

    pub fn as_ms(self) -> f64 {
        self.0
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

/// Saturates at zero.
impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime((self.0 - rhs.0).max(0.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

/// Kinds of events the fog engine schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    TupleEmit,
    TupleArrival,
    ProcessingComplete,
    TransferComplete,
    WindowClose,
    SimEnd,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::TupleEmit => "TupleEmit",
            EventKind::TupleArrival => "TupleArrival",
            EventKind::ProcessingComplete => "ProcessingComplete",
            EventKind::TransferComplete => "TransferComplete",
            EventKind::WindowClose => "WindowClose",
            EventKind::SimEnd => "SimEnd",
        }
    }
}

/// Identifies a scheduled event; equal to its sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(pub u64);

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: P,
}

// Heap entries compare on (fire_at, seq) only, reversed to make a min-heap.
struct Entry<P>(Event<P>);

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.seq == other.0.seq
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.fire_at, other.0.seq).cmp(&(self.0.fire_at, self.0.seq))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("event scheduled at {fire_at} ms but the clock is already at {now} ms")]
    PastEvent { fire_at: SimTime, now: SimTime },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct KernelStats {
    pub events_processed: u64,
}

/// Event queue plus clock.
pub struct Kernel<P> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Entry<P>>,
    processed: u64,
}

impl<P> Default for Kernel<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Kernel<P> {
    pub fn new() -> Self {
        Kernel { now: SimTime::ZERO, next_seq: 0, queue: BinaryHeap::new(), processed: 0 }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Iterates pending events in arbitrary order.
    pub fn pending_events(&self) -> impl Iterator<Item = &Event<P>> {
        self.queue.iter().map(|e| &e.0)
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: P) -> Result<EventHandle, KernelError> {
        if fire_at < self.now {
            return Err(KernelError::PastEvent { fire_at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Entry(Event { fire_at, seq, payload }));
        Ok(EventHandle(seq))
    }

    /// Schedules `delay` after the current clock. Never fails.
    pub fn schedule_in(&mut self, delay: SimTime, payload: P) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, payload).expect("nonnegative delay cannot land in the past")
    }

    /// Pops the next event if it fires at or before `horizon`, advancing the clock.
    pub fn next_until(&mut self, horizon: SimTime) -> Option<Event<P>> {
        if self.queue.peek()?.0.fire_at > horizon {
            return None;
        }
        let Entry(ev) = self.queue.pop()?;
        debug_assert!(ev.fire_at >= self.now);
        self.now = ev.fire_at;
        self.processed += 1;
        Some(ev)
    }

    /// Processes every event firing at or before `horizon` in `(fire_at, seq)` order.
    /// The handler may schedule further events through the kernel it receives.
    pub fn run_until<F>(&mut self, horizon: SimTime, mut handler: F) -> KernelStats
    where
        F: FnMut(&mut Kernel<P>, Event<P>),
    {
        let before = self.processed;
        while let Some(ev) = self.next_until(horizon) {
            handler(self, ev);
        }
        KernelStats { events_processed: self.processed - before }
    }

    pub fn stats(&self) -> KernelStats {
        KernelStats { events_processed: self.processed }
    }
}

/// Factory for independent, named random substreams derived from one seed.
///
/// Each name selects a distinct ChaCha stream, so adding or removing a consumer
/// never shifts the values another consumer sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomStreams {
    seed: u64,
}

impl RandomStreams {
    pub fn new(seed: u64) -> Self {
        RandomStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a64(name.as_bytes()));
        rng
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
