//! Prequential evaluation: link-prediction ranks (HITS@k) and next-time
//! prediction (MAE), with naive yardsticks.
//!
//! States roll through the training stream, then each test step is scored
//! before it is consumed.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::embeddings::NodeStates;
use crate::config::{hex, EvalMissing, TieRule, TrainConfig};
use crate::heads::Process;
use crate::missing::DrawSource;
use crate::model::{MissingMode, Model, ModelError, StepOptions};
use crate::stream::{batch_by_timestep, Event, EventStream};
use crate::trainer::step_seed;

pub const HITS_KS: [usize; 3] = [3, 5, 10];
const EVAL_SALT: u64 = 0xE7A1_0000_0000_0001;

/// `1 + #{candidates scoring strictly higher}` (optimistic) or
/// `#{candidates scoring at least as high}` (pessimistic).
pub fn rank_of(scores: &[f64], target: usize, rule: TieRule) -> usize {
    let s = scores[target];
    match rule {
        TieRule::Optimistic => 1 + scores.iter().filter(|&&x| x > s).count(),
        TieRule::Pessimistic => scores.iter().filter(|&&x| x >= s).count(),
    }
}

/// Percentage of ranks within the top `k`.
pub fn hits_at(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn mean_absolute_error(predicted: &[f64], truth: &[f64]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / predicted.len() as f64
}

/// Expected HITS@k of a uniformly random ranking, in percent.
pub fn random_hits(k: usize, node_count: usize) -> f64 {
    100.0 * (k as f64 / node_count as f64).min(1.0)
}

/// Mean training interval `t - max(last[u], last[v])`, overall and per unordered pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GapTable {
    pub global: f64,
    pub per_pair: HashMap<(usize, usize), f64>,
}

impl GapTable {
    pub fn from_intervals(intervals: &[((usize, usize), f64)]) -> GapTable {
        let mut sums: HashMap<(usize, usize), (f64, usize)> = HashMap::new();
        let mut total = 0.0;
        for &(pair, tau) in intervals {
            let e = sums.entry(pair).or_default();
            e.0 += tau;
            e.1 += 1;
            total += tau;
        }
        GapTable {
            global: if intervals.is_empty() { 0.0 } else { total / intervals.len() as f64 },
            per_pair: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        }
    }

    /// Per-pair mean with the global mean as fallback.
    pub fn predict(&self, pair: (usize, usize)) -> f64 {
        self.per_pair.get(&pair).copied().unwrap_or(self.global)
    }
}

/// Intervals of every event in `stream`, measured as the model measures them.
pub fn stream_intervals(stream: &EventStream, start: f64) -> Vec<((usize, usize), f64)> {
    let mut last = vec![start - 1.0; stream.node_count];
    let mut out = Vec::with_capacity(stream.len());
    for step in batch_by_timestep(stream) {
        for e in &step.observed {
            out.push((e.pair(), e.t - last[e.u].max(last[e.v])));
        }
        for e in &step.observed {
            last[e.u] = last[e.u].max(e.t);
            last[e.v] = last[e.v].max(e.t);
        }
    }
    out
}

/// Naive yardsticks: `(per-pair-mean MAE, global-mean MAE, random HITS@k)`.
pub fn naive_baselines(train: &EventStream, test_full: &EventStream, scored: &[bool]) -> (f64, f64, BTreeMap<usize, f64>) {
    let start = train.start_time().or(test_full.start_time()).unwrap_or(0.0);
    let table = GapTable::from_intervals(&stream_intervals(train, start));
    let mut joined = train.clone();
    joined.events.extend_from_slice(&test_full.events);
    let all = stream_intervals(&joined, start);
    let test_part = &all[train.len()..];
    let (mut pair_err, mut global_err, mut n) = (0.0, 0.0, 0usize);
    for (&(pair, tau), &keep) in test_part.iter().zip(scored) {
        if keep {
            pair_err += (table.predict(pair) - tau).abs();
            global_err += (table.global - tau).abs();
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let random = HITS_KS.iter().map(|&k| (k, random_hits(k, train.node_count))).collect();
    (pair_err / n, global_err / n, random)
}

/// Which test events are scored: all, or the earliest per unordered pair.
pub fn scored_mask(test_full: &EventStream, dedup: bool) -> Vec<bool> {
    if !dedup {
        return vec![true; test_full.len()];
    }
    let mut seen = HashSet::new();
    test_full.events.iter().map(|e| seen.insert(e.pair())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentages keyed by k.
    pub hits_at: BTreeMap<usize, f64>,
    /// Dataset time units.
    pub mae: f64,
    pub n_test: usize,
    /// Per-pair mean training interval, global fallback.
    pub baseline_mae: f64,
    /// Global mean training interval.
    pub baseline_mae_global: f64,
    pub random_hits: BTreeMap<usize, f64>,
    pub node_count: usize,
    pub tie_rule: TieRule,
    pub eval_missing: EvalMissing,
    pub config_fingerprint: String,
    pub run_id: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Per-event outputs behind a report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalDetail {
    pub events: Vec<Event>,
    pub ranks: Vec<usize>,
    pub predicted: Vec<f64>,
}

/// Digest over parameter names, shapes and values.
pub fn params_digest(model: &Model) -> String {
    let mut h = Sha256::new();
    for (_, p) in model.params.iter() {
        h.update(p.name.as_bytes());
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in p.value.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn missing_mode(cfg: &TrainConfig) -> MissingMode {
    if cfg.wo_m {
        return MissingMode::Off;
    }
    match cfg.eval_missing {
        EvalMissing::Prior => MissingMode::Prior,
        EvalMissing::Posterior => MissingMode::Posterior,
        EvalMissing::Off => MissingMode::Off,
    }
}

pub fn evaluate(model: &Model, train: &EventStream, test_full: &EventStream, cfg: &TrainConfig) -> Result<EvalReport, ModelError> {
    evaluate_detailed(model, train, test_full, cfg).map(|(r, _)| r)
}

/// Roll through `train`, then score and consume `test_full` step by step.
pub fn evaluate_detailed(
    model: &Model,
    train: &EventStream,
    test_full: &EventStream,
    cfg: &TrainConfig,
) -> Result<(EvalReport, EvalDetail), ModelError> {
    let scored = scored_mask(test_full, cfg.dedup_test);
    let mut joined = train.clone();
    joined.events.extend_from_slice(&test_full.events);
    let steps = batch_by_timestep(&joined);
    let start = steps.first().ok_or(ModelError::EmptyStream)?.t;
    let test_start = test_full.start_time();
    let mut states = model.initial_states(start);
    let mode = missing_mode(cfg);
    let q = cfg.effective_q()?;
    let mut detail = EvalDetail::default();
    let mut truths = Vec::new();
    let mut test_index = 0usize;

    for (index, step) in steps.iter().enumerate() {
        let mut tape = Tape::new(&model.params);
        let mut vars = states.attach(&mut tape);
        let opts = StepOptions {
            q,
            missing: mode,
            source: DrawSource::Live {
                seed: step_seed(cfg.seed ^ EVAL_SALT, 0, index),
            },
            mc_samples: cfg.mc_samples,
            normalize_truncation: cfg.normalize_truncation,
        };
        let fwd = model.forward_step(&mut tape, &mut states, &mut vars, step, &opts)?;
        let is_test = test_start.is_some_and(|t0| step.t >= t0);
        if is_test {
            let keep: Vec<usize> = (0..step.observed.len())
                .filter(|&i| scored[test_index + i])
                .collect();
            test_index += step.observed.len();
            if !keep.is_empty() {
                let events: Vec<Event> = keep.iter().map(|&i| step.observed[i]).collect();
                let us: Vec<usize> = events.iter().map(|e| e.u).collect();
                let pairs: Vec<(usize, usize)> = events.iter().map(|e| (e.u, e.v)).collect();
                let object = model
                    .layout
                    .heads
                    .object_logprobs(&mut tape, Process::Observed, &us, &fwd.scoring, None)?;
                let ctx = fwd.scoring.pair_evolved(&mut tape, &pairs)?;
                let mix = model.layout.obs_tpp.forward(&mut tape, ctx)?;
                for (row, (&i, e)) in keep.iter().zip(&events).enumerate() {
                    detail.ranks.push(rank_of(tape.row(object, row), e.v, cfg.tie_rule));
                    let expected = mix.params(&tape, row)?.expectation();
                    detail.predicted.push(fwd.pair_last[i] + expected);
                    truths.push(e.t);
                }
                detail.events.extend(events);
            }
        }
        states.detach(&tape, &vars);
    }

    let (baseline_mae, baseline_mae_global, random) = naive_baselines(train, test_full, &scored);
    let mut id = Sha256::new();
    id.update(cfg.fingerprint().as_bytes());
    id.update(params_digest(model).as_bytes());
    for e in &test_full.events {
        id.update((e.u as u64).to_le_bytes());
        id.update((e.v as u64).to_le_bytes());
        id.update(e.t.to_le_bytes());
    }
    let report = EvalReport {
        hits_at: HITS_KS.iter().map(|&k| (k, hits_at(&detail.ranks, k))).collect(),
        mae: mean_absolute_error(&detail.predicted, &truths),
        n_test: detail.ranks.len(),
        baseline_mae,
        baseline_mae_global,
        random_hits: random,
        node_count: model.node_count(),
        tie_rule: cfg.tie_rule,
        eval_missing: cfg.eval_missing,
        config_fingerprint: cfg.fingerprint(),
        run_id: hex(&id.finalize())[..12].to_string(),
    };
    Ok((report, detail))
}

/// Consume `stream` with the evaluation missing mode and return the final states.
pub fn rollout(model: &Model, stream: &EventStream, cfg: &TrainConfig) -> Result<NodeStates, ModelError> {
    let steps = batch_by_timestep(stream);
    let start = steps.first().ok_or(ModelError::EmptyStream)?.t;
    let mut states = model.initial_states(start);
    let q = cfg.effective_q()?;
    for (index, step) in steps.iter().enumerate() {
        let mut tape = Tape::new(&model.params);
        let mut vars = states.attach(&mut tape);
        let opts = StepOptions {
            q,
            missing: missing_mode(cfg),
            source: DrawSource::Live {
                seed: step_seed(cfg.seed ^ EVAL_SALT, 0, index),
            },
            mc_samples: cfg.mc_samples,
            normalize_truncation: cfg.normalize_truncation,
        };
        model.forward_step(&mut tape, &mut states, &mut vars, step, &opts)?;
        states.detach(&tape, &vars);
    }
    Ok(states)
}
