//! Event-stream data model: parsing, time-step batching, chronological
//! splitting with test dedup, random masking and synthetic generation.

mod io;
mod synthetic;

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{parse_events, parse_events_str, write_events, write_events_string, IdMap, ParseOptions};
pub use synthetic::{generate_synthetic, Regime, EVENTS_PER_UNIT, SyntheticConfig, SyntheticMeta};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("event stream is empty")]
    Empty,
    #[error("test fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("mask fraction must lie in [0, 1), got {0}")]
    InvalidMask(f64),
    #[error("degenerate synthetic graph: {n_events} events for {n_nodes} nodes")]
    Degenerate { n_events: usize, n_nodes: usize },
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
    #[error("split leaves no {0} events")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Observed,
    Missing,
}

/// One undirected interaction `(u, v, t)`. Observed events carry integral
/// timestamps in dataset units; generated missing events may fall between them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub u: usize,
    pub v: usize,
    pub t: f64,
    pub kind: EventKind,
}

impl Event {
    pub fn observed(u: usize, v: usize, t: f64) -> Self {
        Event {
            u,
            v,
            t,
            kind: EventKind::Observed,
        }
    }

    pub fn missing(u: usize, v: usize, t: f64) -> Self {
        Event {
            u,
            v,
            t,
            kind: EventKind::Missing,
        }
    }

    /// Unordered pair key.
    pub fn pair(&self) -> (usize, usize) {
        (self.u.min(self.v), self.u.max(self.v))
    }
}

/// Time-ordered event list over dense node ids `0..node_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub node_count: usize,
    pub time_unit: String,
}

impl EventStream {
    pub fn new(events: Vec<Event>, node_count: usize, time_unit: impl Into<String>) -> Self {
        EventStream {
            events,
            node_count,
            time_unit: time_unit.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn start_time(&self) -> Option<f64> {
        self.events.first().map(|e| e.t)
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t <= w[1].t)
    }

    fn with_events(&self, events: Vec<Event>) -> EventStream {
        EventStream {
            events,
            node_count: self.node_count,
            time_unit: self.time_unit.clone(),
        }
    }
}

/// All observed events sharing timestamp `t`, plus the generated missing
/// events placed strictly inside `(t_bar, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeStep {
    pub t: f64,
    pub t_bar: f64,
    pub observed: Vec<Event>,
    pub missing: Vec<Event>,
}

/// One step per distinct timestamp; the first step's `t_bar` is one unit earlier.
pub fn batch_by_timestep(stream: &EventStream) -> Vec<TimeStep> {
    let mut steps: Vec<TimeStep> = Vec::new();
    for e in &stream.events {
        match steps.last_mut() {
            Some(step) if step.t == e.t => step.observed.push(*e),
            last => {
                let t_bar = last.map_or(e.t - 1.0, |s| s.t);
                steps.push(TimeStep {
                    t: e.t,
                    t_bar,
                    observed: vec![*e],
                    missing: Vec::new(),
                });
            }
        }
    }
    steps
}

pub fn flatten(steps: &[TimeStep]) -> Vec<Event> {
    steps.iter().flat_map(|s| s.observed.iter().copied()).collect()
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: EventStream,
    /// Scored test events (deduplicated when requested).
    pub test: EventStream,
    /// Every test-period event, in order; evaluation consumes these into state.
    pub test_full: EventStream,
    /// Test size before earliest-occurrence dedup.
    pub test_raw_len: usize,
    /// Percentage of (deduplicated) test events whose pair never occurs in train.
    pub inductive_pct: f64,
}

/// Chronological split. The boundary never cuts a timestamp group: if it
/// would, the whole group goes to the test side. With `dedup`, only the
/// earliest test event of each unordered pair is kept.
pub fn split_train_test(stream: &EventStream, test_fraction: f64, dedup: bool) -> Result<Split, StreamError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(StreamError::InvalidFraction(test_fraction));
    }
    if stream.is_empty() {
        return Err(StreamError::Empty);
    }
    let n = stream.len();
    let n_test = ((n as f64) * test_fraction).round().max(1.0) as usize;
    let mut boundary = n.saturating_sub(n_test);
    let events = &stream.events;
    while boundary > 0 && boundary < n && events[boundary - 1].t == events[boundary].t {
        boundary -= 1;
    }
    if boundary == 0 {
        return Err(StreamError::EmptySplit("train"));
    }
    if boundary == n {
        return Err(StreamError::EmptySplit("test"));
    }
    let train = events[..boundary].to_vec();
    let raw_test = &events[boundary..];
    let test: Vec<Event> = if dedup {
        let mut seen = HashSet::new();
        raw_test.iter().filter(|e| seen.insert(e.pair())).copied().collect()
    } else {
        raw_test.to_vec()
    };
    let train_pairs: HashSet<(usize, usize)> = train.iter().map(Event::pair).collect();
    let inductive = test.iter().filter(|e| !train_pairs.contains(&e.pair())).count();
    Ok(Split {
        inductive_pct: 100.0 * inductive as f64 / test.len() as f64,
        test_raw_len: raw_test.len(),
        train: stream.with_events(train),
        test: stream.with_events(test),
        test_full: stream.with_events(raw_test.to_vec()),
    })
}

/// Remove `floor(z * |E|)` events uniformly at random. Returns `(kept, masked)`,
/// both in stream order.
pub fn mask_events(stream: &EventStream, z: f64, seed: u64) -> Result<(EventStream, Vec<Event>), StreamError> {
    if !(0.0..1.0).contains(&z) {
        return Err(StreamError::InvalidMask(z));
    }
    let n = stream.len();
    let n_mask = (z * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = vec![false; n];
    for i in sample(&mut rng, n, n_mask).iter() {
        drop[i] = true;
    }
    let mut kept = Vec::with_capacity(n - n_mask);
    let mut masked = Vec::with_capacity(n_mask);
    for (e, d) in stream.events.iter().zip(drop) {
        if d {
            masked.push(*e);
        } else {
            kept.push(*e);
        }
    }
    Ok((stream.with_events(kept), masked))
}
