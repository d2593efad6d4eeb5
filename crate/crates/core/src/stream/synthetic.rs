use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{Event, EventStream, StreamError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Community-biased partners, regular gaps, one tempo per community.
    PeriodicCommunities,
    /// Degree-preferential partners, heavy-tailed gaps.
    PreferentialBursty,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::PeriodicCommunities => "periodic-communities",
            Regime::PreferentialBursty => "preferential-bursty",
        })
    }
}

impl FromStr for Regime {
    type Err = StreamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "periodic-communities" => Ok(Regime::PeriodicCommunities),
            "preferential-bursty" => Ok(Regime::PreferentialBursty),
            other => Err(StreamError::InvalidConfig(format!("unknown regime {other:?}"))),
        }
    }
}

/// Target aggregate event rate used to scale the default gap.
pub const EVENTS_PER_UNIT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_nodes: usize,
    pub n_events: usize,
    pub regime: Regime,
    pub seed: u64,
    pub communities: usize,
    /// Probability that a new pair is drawn inside the initiator's community.
    pub intra_bias: f64,
    /// Active pairs initiated per node; each pair runs its own gap clock.
    pub pairs_per_node: usize,
    /// Log-mean of the gap distribution for clock 0; clock `c` adds `c * log_mean_step`.
    /// Defaults to `ln(n_nodes * pairs_per_node / EVENTS_PER_UNIT)`.
    pub base_log_mean: f64,
    pub log_mean_step: f64,
    pub log_std: f64,
}

impl SyntheticConfig {
    pub fn new(n_nodes: usize, n_events: usize, regime: Regime, seed: u64) -> Self {
        let (communities, log_mean_step, log_std) = match regime {
            Regime::PeriodicCommunities => (4, 0.5, 0.3),
            Regime::PreferentialBursty => (1, 0.0, 1.0),
        };
        SyntheticConfig {
            n_nodes,
            n_events,
            regime,
            seed,
            communities,
            intra_bias: 0.9,
            pairs_per_node: 3,
            base_log_mean: ((n_nodes * 3) as f64 / EVENTS_PER_UNIT).max(1.0).ln(),
            log_mean_step,
            log_std,
        }
    }

    pub fn log_mean(&self, clock: usize) -> f64 {
        self.base_log_mean + clock as f64 * self.log_mean_step
    }

    /// `exp(mu + sigma^2 / 2)` for clock `c`.
    pub fn expected_gap(&self, clock: usize) -> f64 {
        (self.log_mean(clock) + 0.5 * self.log_std * self.log_std).exp()
    }
}

/// Generative parameters written next to a synthetic stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub config: SyntheticConfig,
    pub time_unit: String,
    pub log_means: Vec<f64>,
    pub expected_mean_gaps: Vec<f64>,
    /// Community (and gap clock) of every node.
    pub community: Vec<usize>,
    /// `(initiator, partner, clock)` for every active pair.
    pub pairs: Vec<(usize, usize, usize)>,
}

impl SyntheticMeta {
    pub fn to_json(&self) -> Result<String, StreamError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-pair renewal processes with log-normal gaps, merged in time order and
/// floored to integer units. Each event's orientation is a fair coin. Partner
/// choice is community-biased or degree-preferential depending on the regime.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(EventStream, SyntheticMeta), StreamError> {
    let n = config.n_nodes;
    if config.n_events < n {
        return Err(StreamError::Degenerate {
            n_events: config.n_events,
            n_nodes: n,
        });
    }
    if n < 2 {
        return Err(StreamError::InvalidConfig("need at least two nodes".into()));
    }
    if config.communities == 0 || config.pairs_per_node == 0 {
        return Err(StreamError::InvalidConfig("communities and pairs_per_node must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.intra_bias) {
        return Err(StreamError::InvalidConfig(format!("intra_bias {} outside [0, 1]", config.intra_bias)));
    }
    if !(config.log_std > 0.0 && config.log_std.is_finite()) {
        return Err(StreamError::InvalidConfig(format!("log_std {} must be positive", config.log_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let community: Vec<usize> = (0..n).map(|i| i % config.communities).collect();
    let members: Vec<Vec<usize>> = (0..config.communities)
        .map(|c| (0..n).filter(|&i| community[i] == c).collect())
        .collect();

    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    let mut degree = vec![0usize; n];
    for u in 0..n {
        for _ in 0..config.pairs_per_node {
            for _attempt in 0..32 {
                let v = match config.regime {
                    Regime::PeriodicCommunities => {
                        let pool = &members[community[u]];
                        if pool.len() > 1 && rng.random::<f64>() < config.intra_bias {
                            pool[rng.random_range(0..pool.len())]
                        } else {
                            rng.random_range(0..n)
                        }
                    }
                    Regime::PreferentialBursty => preferential(&degree, &mut rng),
                };
                if v != u && seen.insert((u.min(v), u.max(v))) {
                    degree[u] += 1;
                    degree[v] += 1;
                    pairs.push((u, v, community[u]));
                    break;
                }
            }
        }
    }

    let clocks: Vec<LogNormal<f64>> = (0..config.communities)
        .map(|c| LogNormal::new(config.log_mean(c), config.log_std).expect("validated parameters"))
        .collect();
    // Positive f64 bit patterns order like the values themselves.
    let mut heap = BinaryHeap::with_capacity(pairs.len());
    for (i, &(_, _, c)) in pairs.iter().enumerate() {
        let first = rng.random::<f64>() * clocks[c].sample(&mut rng);
        heap.push(Reverse((first.to_bits(), i)));
    }
    let mut events = Vec::with_capacity(config.n_events);
    while events.len() < config.n_events {
        let Reverse((bits, i)) = heap.pop().expect("heap holds one entry per pair");
        let t = f64::from_bits(bits);
        let (u, v, c) = pairs[i];
        let (u, v) = if rng.random::<bool>() { (u, v) } else { (v, u) };
        events.push(Event::observed(u, v, t.floor()));
        heap.push(Reverse(((t + clocks[c].sample(&mut rng)).to_bits(), i)));
    }
    let t0 = events[0].t;
    for e in &mut events {
        e.t -= t0;
    }

    let time_unit = "1 unit".to_string();
    let meta = SyntheticMeta {
        config: config.clone(),
        time_unit: time_unit.clone(),
        log_means: (0..config.communities).map(|c| config.log_mean(c)).collect(),
        expected_mean_gaps: (0..config.communities).map(|c| config.expected_gap(c)).collect(),
        community,
        pairs,
    };
    Ok((EventStream::new(events, n, time_unit), meta))
}

fn preferential<R: Rng>(degree: &[usize], rng: &mut R) -> usize {
    let total: usize = degree.iter().map(|d| d + 1).sum();
    let mut pick = rng.random_range(0..total);
    for (i, d) in degree.iter().enumerate() {
        if pick <= *d {
            return i;
        }
        pick -= d + 1;
    }
    degree.len() - 1
}
