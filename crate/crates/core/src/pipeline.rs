//! Split, mask, train and evaluate one event stream under one configuration.

use std::time::Instant;

use crate::config::TrainConfig;
use crate::evaluator::{evaluate, EvalReport};
use crate::model::{Model, ModelError};
use crate::stream::{generate_synthetic, mask_events, split_train_test, Event, EventStream, Regime, Split, SyntheticConfig};
use crate::trainer::{fit, History};

/// Chronological split plus the masked training stream actually used.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: Split,
    pub train: EventStream,
    /// Removed training events, kept for diagnostics only.
    pub masked: Vec<Event>,
}

/// The mask is drawn with `cfg.seed`, so variants trained under the same seed
/// see the same kept events.
pub fn prepare(stream: &EventStream, cfg: &TrainConfig) -> Result<Prepared, ModelError> {
    cfg.validate()?;
    let split = split_train_test(stream, cfg.test_fraction, cfg.dedup_test)?;
    let (train, masked) = mask_events(&split.train, cfg.mask_z, cfg.seed)?;
    Ok(Prepared { split, train, masked })
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub model: Model,
    pub history: History,
    pub report: EvalReport,
}

pub fn train_and_evaluate(stream: &EventStream, cfg: &TrainConfig) -> Result<Outcome, ModelError> {
    let prepared = prepare(stream, cfg)?;
    let mut model = Model::new(cfg, stream.node_count)?;
    let history = fit(&mut model, &prepared.train, cfg)?;
    let report = evaluate(&model, &prepared.train, &prepared.split.test_full, cfg)?;
    Ok(Outcome { model, history, report })
}

pub const BENCH_SIZES: [usize; 4] = [1000, 2000, 4000, 8000];
pub const BENCH_HEADER: &str = "n_events,epoch_seconds";

/// Mean wall time of one training epoch over `cfg.max_epochs` epochs.
pub fn epoch_seconds(stream: &EventStream, cfg: &TrainConfig) -> Result<f64, ModelError> {
    let mut model = Model::new(cfg, stream.node_count)?;
    let started = Instant::now();
    fit(&mut model, stream, cfg)?;
    Ok(started.elapsed().as_secs_f64() / cfg.max_epochs.max(1) as f64)
}

/// Epoch time on periodic synthetic streams of each size over `nodes` nodes.
pub fn bench_scaling(sizes: &[usize], nodes: usize, cfg: &TrainConfig) -> Result<Vec<(usize, f64)>, ModelError> {
    sizes
        .iter()
        .map(|&n| {
            let (stream, _) = generate_synthetic(&SyntheticConfig::new(nodes, n, Regime::PeriodicCommunities, cfg.seed))?;
            Ok((n, epoch_seconds(&stream, cfg)?))
        })
        .collect()
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
