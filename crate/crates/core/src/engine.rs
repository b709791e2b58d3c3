//! Deterministic discrete-event core.
//!
//! Actions are kept in a map ordered by `(fire_at, seq)`, so equal fire times
//! dispatch in insertion order. Everything observable about a run goes into a
//! [`Trace`], and all randomness comes from a single seeded [`RandomSource`].

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::EngineError;

/// A point on the simulated time axis, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn new(seconds: f64) -> Result<Self, EngineError> {
        if seconds.is_finite() && seconds >= 0.0 {
            Ok(SimTime(seconds))
        } else {
            Err(EngineError::InvalidTime(seconds))
        }
    }

    pub fn seconds(self) -> f64 {
        self.0
    }

    /// Seconds elapsed since `earlier` (negative if `earlier` is later).
    pub fn since(self, earlier: SimTime) -> f64 {
        self.0 - earlier.0
    }

    pub(crate) fn plus(self, delay: f64) -> SimTime {
        SimTime(self.0 + delay)
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

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}s", self.0)
    }
}

/// Handle returned by [`Engine::schedule`]; identifies one queued action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ActionHandle {
    pub fire_at: SimTime,
    pub seq: u64,
}

/// One dispatched action, as handed out by [`Engine::pop_due`].
#[derive(Debug)]
pub struct ScheduledAction<A> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: A,
}

/// Where a run stops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stop {
    At(SimTime),
    Quiescence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry<E> {
    pub time: SimTime,
    #[serde(flatten)]
    pub event: E,
}

/// Ordered record of everything that happened in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace<E> {
    entries: Vec<TraceEntry<E>>,
}

impl<E> Default for Trace<E> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<E> Trace<E> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry. Timestamps must not go backwards.
    pub fn record(&mut self, time: SimTime, event: E) {
        if let Some(last) = self.entries.last() {
            assert!(time >= last.time, "trace time went backwards: {time} < {}", last.time);
        }
        self.entries.push(TraceEntry { time, event });
    }

    pub fn entries(&self) -> &[TraceEntry<E>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceEntry<E>> {
        self.entries.iter()
    }
}

/// Seeded generator; two sources with the same seed yield the same draws.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

const SUFFIX_ALPHABET: &[u8] = b"bcdfghjklmnpqrstvwxz2456789";

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            lo
        } else {
            self.rng.random_range(lo..hi)
        }
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        match Normal::new(mean, std_dev) {
            Ok(d) => d.sample(&mut self.rng),
            Err(_) => mean,
        }
    }

    pub fn exponential(&mut self, mean: f64) -> f64 {
        if mean <= 0.0 {
            return 0.0;
        }
        Exp::new(1.0 / mean).map(|d| d.sample(&mut self.rng)).unwrap_or(mean)
    }

    pub fn below(&mut self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            self.rng.random_range(0..n)
        }
    }

    /// `amount` distinct indices out of `0..len`, in ascending order.
    pub fn choose_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        let mut picked = index::sample(&mut self.rng, len, amount.min(len)).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Lower-case alphanumeric suffix in the style of generated pod names.
    pub fn suffix(&mut self, len: usize) -> String {
        (0..len)
            .map(|_| SUFFIX_ALPHABET[self.rng.random_range(0..SUFFIX_ALPHABET.len())] as char)
            .collect()
    }
}

/// Single-threaded event loop state: clock, queue, trace and randomness.
pub struct Engine<A, E> {
    now: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), A>,
    finished: bool,
    trace: Trace<E>,
    rng: RandomSource,
}

impl<A, E> Engine<A, E> {
    pub fn new(seed: u64) -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BTreeMap::new(),
            finished: false,
            trace: Trace::new(),
            rng: RandomSource::new(seed),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, delay: f64, payload: A) -> Result<ActionHandle, EngineError> {
        if !(delay.is_finite() && delay >= 0.0) {
            return Err(EngineError::NegativeDelay(delay));
        }
        self.schedule_at(self.now.plus(delay), payload)
    }

    pub fn schedule_at(&mut self, at: SimTime, payload: A) -> Result<ActionHandle, EngineError> {
        if self.finished {
            return Err(EngineError::Finished);
        }
        if at < self.now {
            return Err(EngineError::InPast { at: at.seconds(), now: self.now.seconds() });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), payload);
        Ok(ActionHandle { fire_at: at, seq })
    }

    /// Removes a queued action. Returns false if it already fired or was cancelled.
    pub fn cancel(&mut self, handle: ActionHandle) -> bool {
        self.queue.remove(&(handle.fire_at, handle.seq)).is_some()
    }

    pub fn is_pending(&self, handle: ActionHandle) -> bool {
        self.queue.contains_key(&(handle.fire_at, handle.seq))
    }

    /// Pops the next action due at or before `stop`, advancing the clock to it.
    pub fn pop_due(&mut self, stop: Stop) -> Option<ScheduledAction<A>> {
        let (&(at, seq), _) = self.queue.first_key_value()?;
        if let Stop::At(limit) = stop {
            if at > limit {
                return None;
            }
        }
        let payload = self.queue.remove(&(at, seq)).expect("key just observed");
        self.now = at;
        Some(ScheduledAction { fire_at: at, seq, payload })
    }

    /// Moves the clock forward to `t` without dispatching (no-op if `t` is in the past).
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Dispatches every action due up to `stop` through `dispatch`, which may schedule more.
    pub fn run_until<F>(&mut self, stop: Stop, mut dispatch: F) -> &Trace<E>
    where
        F: FnMut(&mut Self, A),
    {
        while let Some(action) = self.pop_due(stop) {
            dispatch(self, action.payload);
        }
        if let Stop::At(t) = stop {
            self.advance_to(t);
        }
        &self.trace
    }

    pub fn pending(&self) -> impl Iterator<Item = (ActionHandle, &A)> {
        self.queue.iter().map(|(&(fire_at, seq), a)| (ActionHandle { fire_at, seq }, a))
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Marks the run finished; later `schedule` calls fail.
    pub fn finish(&mut self) {
        self.finished = true;
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn record(&mut self, event: E) {
        self.trace.record(self.now, event);
    }

    pub fn trace(&self) -> &Trace<E> {
        &self.trace
    }

    pub fn into_trace(self) -> Trace<E> {
        self.trace
    }

    pub fn rng(&mut self) -> &mut RandomSource {
        &mut self.rng
    }
}
