//! Training: per-step ELBO terms, truncated BPTT over windows of `b` steps,
//! AdamW updates, learning-rate selection and checkpoint helpers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::autodiff::{AdamW, Gradients, Tape, Var};
use crate::config::TrainConfig;
use crate::embeddings::{NodeStates, StateVars};
use crate::missing::{mix_seed, Draw, DrawSource};
use crate::model::{MissingMode, Model, ModelError, StepOptions};
use crate::stream::{batch_by_timestep, split_train_test, EventStream, TimeStep};

/// Loss terms of one step. `total = -(l_obs_structure + l_obs_time) + l_missing_kl`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub l_obs_structure: f64,
    pub l_obs_time: f64,
    pub l_missing_kl: f64,
    pub total: f64,
}

impl StepLoss {
    fn add(&mut self, other: &StepLoss) {
        self.l_obs_structure += other.l_obs_structure;
        self.l_obs_time += other.l_obs_time;
        self.l_missing_kl += other.l_missing_kl;
        self.total += other.total;
    }

    fn scaled(&self, c: f64) -> StepLoss {
        StepLoss {
            l_obs_structure: self.l_obs_structure * c,
            l_obs_time: self.l_obs_time * c,
            l_missing_kl: self.l_missing_kl * c,
            total: self.total * c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's steps.
    pub loss: StepLoss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub hits_at_10: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub validation: Vec<ValidationRecord>,
    pub optimizer_steps: usize,
}

pub const HISTORY_HEADER: &str = "epoch,loss_total,loss_obs_struct,loss_obs_time,loss_kl";
pub const VALIDATION_HEADER: &str = "epoch,hits_at_10,mae";

impl History {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        writeln!(w, "{HISTORY_HEADER}")?;
        for r in &self.epochs {
            let l = &r.loss;
            writeln!(
                w,
                "{},{},{},{},{}",
                r.epoch, l.total, l.l_obs_structure, l.l_obs_time, l.l_missing_kl
            )?;
        }
        Ok(())
    }

    pub fn write_validation_csv<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        writeln!(w, "{VALIDATION_HEADER}")?;
        for r in &self.validation {
            writeln!(w, "{},{},{}", r.epoch, r.hits_at_10, r.mae)?;
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.loss.total).collect()
    }
}

/// Options derived from the config for training-time steps.
pub fn step_options<'a>(cfg: &TrainConfig, source: DrawSource<'a>) -> Result<StepOptions<'a>, ModelError> {
    Ok(StepOptions {
        q: cfg.effective_q()?,
        missing: if cfg.wo_m { MissingMode::Off } else { MissingMode::Posterior },
        source,
        mc_samples: cfg.mc_samples,
        normalize_truncation: cfg.normalize_truncation,
    })
}

/// Seed for step `index` of `epoch`.
pub fn step_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    mix_seed(mix_seed(seed, epoch as u64), index as u64)
}

/// Forward one step and assemble its loss on `tape`. Returns the scalar loss,
/// its value decomposition and the draws used.
pub fn step(
    model: &Model,
    tape: &mut Tape<'_>,
    states: &mut NodeStates,
    vars: &mut StateVars,
    time_step: &TimeStep,
    opts: &StepOptions<'_>,
) -> Result<(Var, StepLoss, Vec<Draw>), ModelError> {
    let fwd = model.forward_step(tape, states, vars, time_step, opts)?;
    let (structure, time) = model.observed_loglik(tape, time_step, &fwd)?;
    let mut loglik = structure;
    if let Some(time) = time {
        loglik = tape.add(loglik, time)?;
    }
    let mut total = tape.neg(loglik);
    let mut kl_value = 0.0;
    let mut draws = Vec::new();
    if let Some(generation) = fwd.generation {
        if let Some(kl) = generation.kl {
            kl_value = tape.scalar(kl);
            total = tape.add(total, kl)?;
        }
        draws = generation.draws;
    }
    let loss = StepLoss {
        l_obs_structure: tape.scalar(structure),
        l_obs_time: time.map_or(0.0, |t| tape.scalar(t)),
        l_missing_kl: kl_value,
        total: tape.scalar(total),
    };
    Ok((total, loss, draws))
}

/// Total loss of a step sequence from fresh states, replaying `draws` per step.
/// Builds everything on `tape`, so it can be differentiated or probed.
pub fn replay_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    steps: &[TimeStep],
    draws: &[Vec<Draw>],
    cfg: &TrainConfig,
) -> Result<Var, ModelError> {
    let start = steps.first().ok_or(ModelError::EmptyStream)?.t;
    let mut states = model.initial_states(start);
    let mut vars = states.attach(tape);
    let mut total: Option<Var> = None;
    for (s, d) in steps.iter().zip(draws) {
        let opts = step_options(cfg, DrawSource::Replay(d))?;
        let (loss, _, _) = step(model, tape, &mut states, &mut vars, s, &opts)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    total.ok_or(ModelError::EmptyStream)
}

/// Callback run after selected epochs; returns `(hits_at_10, mae)`.
pub type Validator<'v> = dyn FnMut(usize, &Model) -> Result<(f64, f64), ModelError> + 'v;

pub fn fit(model: &mut Model, train: &EventStream, cfg: &TrainConfig) -> Result<History, ModelError> {
    fit_with(model, train, cfg, None)
}

/// Train for `cfg.max_epochs` epochs. States reset at each epoch start; the
/// optimiser runs after every `b` steps and states are detached there.
pub fn fit_with(
    model: &mut Model,
    train: &EventStream,
    cfg: &TrainConfig,
    mut validator: Option<&mut Validator<'_>>,
) -> Result<History, ModelError> {
    cfg.validate()?;
    let steps = batch_by_timestep(train);
    if steps.is_empty() {
        return Err(ModelError::EmptyStream);
    }
    let start = steps[0].t;
    let optimizer = AdamW::new(cfg.optimizer());
    let mut history = History::default();
    for epoch in 0..cfg.max_epochs {
        let mut states = model.initial_states(start);
        let mut sum = StepLoss::default();
        for (w, window) in steps.chunks(cfg.bptt_steps).enumerate() {
            let mut grads = Gradients::new();
            {
                let mut tape = Tape::new(&model.params);
                let mut vars = states.attach(&mut tape);
                let mut total: Option<Var> = None;
                for (j, s) in window.iter().enumerate() {
                    let index = w * cfg.bptt_steps + j;
                    let opts = step_options(cfg, DrawSource::Live { seed: step_seed(cfg.seed, epoch, index) })?;
                    let non_finite = ModelError::NonFiniteLoss { epoch, step: index };
                    let (loss, values, _) = step(model, &mut tape, &mut states, &mut vars, s, &opts)
                        .map_err(|e| if e.is_non_finite() { non_finite } else { e })?;
                    if !values.total.is_finite() {
                        return Err(ModelError::NonFiniteLoss { epoch, step: index });
                    }
                    sum.add(&values);
                    total = Some(match total {
                        Some(acc) => tape.add(acc, loss)?,
                        None => loss,
                    });
                }
                let total = total.expect("windows are non-empty");
                tape.backward_into(total, &mut grads)?;
                states.detach(&tape, &vars);
            }
            optimizer.step(&mut model.params, &grads)?;
            history.optimizer_steps += 1;
        }
        let mean = sum.scaled(1.0 / steps.len() as f64);
        log::info!("epoch {epoch}: loss {:.4}", mean.total);
        history.epochs.push(EpochRecord { epoch, loss: mean });
        if let Some(v) = validator.as_deref_mut() {
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
                let (hits_at_10, mae) = v(epoch, model)?;
                history.validation.push(ValidationRecord { epoch, hits_at_10, mae });
            }
        }
    }
    Ok(history)
}

/// Mean per-step loss over `eval` after rolling states through `warm`,
/// without updating parameters.
pub fn holdout_loss(model: &Model, warm: &EventStream, eval: &EventStream, cfg: &TrainConfig) -> Result<f64, ModelError> {
    let warm_steps = batch_by_timestep(warm);
    let eval_steps = batch_by_timestep(eval);
    let start = warm_steps
        .first()
        .or(eval_steps.first())
        .ok_or(ModelError::EmptyStream)?
        .t;
    let mut states = model.initial_states(start);
    let mut sum = 0.0;
    let all = warm_steps.iter().chain(&eval_steps).enumerate();
    for (index, s) in all {
        let mut tape = Tape::new(&model.params);
        let mut vars = states.attach(&mut tape);
        let opts = step_options(cfg, DrawSource::Live { seed: step_seed(cfg.seed ^ 0x5EED, 0, index) })?;
        let (_, values, _) = step(model, &mut tape, &mut states, &mut vars, s, &opts)?;
        if index >= warm_steps.len() {
            sum += values.total;
        }
        states.detach(&tape, &vars);
    }
    Ok(sum / eval_steps.len().max(1) as f64)
}

/// Train once per grid rate on the first 90% of `train` and keep the rate with
/// the lowest mean loss on the last 10%. Returns the choice and every score.
pub fn select_lr(train: &EventStream, cfg: &TrainConfig) -> Result<(f64, Vec<(f64, f64)>), ModelError> {
    let split = split_train_test(train, 0.1, false)?;
    let mut scores = Vec::with_capacity(cfg.lr_grid.len());
    for &lr in &cfg.lr_grid {
        let trial = TrainConfig { lr, ..cfg.clone() };
        let mut model = Model::new(&trial, train.node_count)?;
        let score = match fit(&mut model, &split.train, &trial) {
            Ok(_) => holdout_loss(&model, &split.train, &split.test_full, &trial).unwrap_or(f64::INFINITY),
            Err(ModelError::NonFiniteLoss { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        log::info!("lr {lr}: holdout loss {score}");
        scores.push((lr, if score.is_finite() { score } else { f64::INFINITY }));
    }
    let best = scores
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, f64)>, (lr, s)| match best {
            Some((_, bs)) if bs <= s => best,
            _ => Some((lr, s)),
        })
        .map(|(lr, _)| lr)
        .unwrap_or(cfg.lr);
    Ok((best, scores))
}

pub fn checkpoint(model: &Model, cfg: &TrainConfig, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    model.save(&mut w, cfg)?;
    w.flush()?;
    Ok(())
}

/// Restore parameters saved by [`checkpoint`], checking the layout against `cfg`.
pub fn restore(path: &Path, cfg: &TrainConfig, node_count: usize) -> Result<Model, ModelError> {
    Model::restore(BufReader::new(File::open(path)?), cfg, node_count)
}
