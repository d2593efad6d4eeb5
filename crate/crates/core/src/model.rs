//! Parameter layout and the shared per-step forward pass used by training
//! and evaluation.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{read_checkpoint, write_checkpoint, AutodiffError, ParamStore, Tape, Var};
use crate::config::{ArchFingerprint, ConfigError, TrainConfig};
use crate::embeddings::{check_missing_window, evolve, message_pass, NodeStates, PathWeights, Readout, StateVars};
use crate::heads::HeadSet;
use crate::missing::{DrawSource, GenerationInput, GenerationResult, Generator, Sampler};
use crate::stream::{StreamError, TimeStep};
use crate::tpp::{MixtureHead, TppError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tpp(#[from] TppError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("event references node {node} but the graph has {count} nodes")]
    UnknownNode { node: usize, count: usize },
    #[error("missing event time {t_prime} outside the open window ({t_bar}, {t})")]
    OutsideWindow { t_prime: f64, t_bar: f64, t: f64 },
    #[error("degenerate window: t = {t} does not exceed t_bar = {t_bar}")]
    DegenerateWindow { t: f64, t_bar: f64 },
    #[error("missing-event ratio must be finite and non-negative, got {0}")]
    NegativeRatio(f64),
    #[error("{0} needs the readout after observed events")]
    MissingReadout(&'static str),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("checkpoint was built with {field} = {stored}, but {requested} was requested")]
    FingerprintMismatch {
        field: &'static str,
        stored: String,
        requested: String,
    },
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("training stream is empty")]
    EmptyStream,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ModelError {
    /// True when a NaN or infinity surfaced somewhere in the forward pass.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            ModelError::NonFiniteLoss { .. }
                | ModelError::Autodiff(AutodiffError::NonFinite(_))
                | ModelError::Tpp(TppError::Autodiff(AutodiffError::NonFinite(_)))
        )
    }
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub dim: usize,
    pub node_count: usize,
    pub obs: PathWeights,
    pub miss: PathWeights,
    pub heads: HeadSet,
    pub obs_tpp: MixtureHead,
    pub prior_tpp: MixtureHead,
    pub post_tpp: MixtureHead,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub params: ParamStore,
    pub layout: Layout,
    pub arch: ArchFingerprint,
}

/// How the step generates missing events.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MissingMode {
    Off,
    Prior,
    Posterior,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions<'a> {
    pub q: f64,
    pub missing: MissingMode,
    pub source: DrawSource<'a>,
    pub mc_samples: usize,
    pub normalize_truncation: bool,
}

/// Everything later stages need from one forward step.
pub struct StepForward {
    /// Observed states through `t_bar`, missing states after this step's generated events.
    pub scoring: Readout,
    /// `t - max(last_obs[u], last_obs[v])` per observed event, from pre-step times.
    pub taus: Vec<f64>,
    /// `max(last_obs[u], last_obs[v])` per observed event, pre-step.
    pub pair_last: Vec<f64>,
    pub generation: Option<GenerationResult>,
}

/// Checkpoint header: layout fingerprint plus the full training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchFingerprint,
    pub config: TrainConfig,
    pub config_fingerprint: String,
}

impl Model {
    /// Fresh parameters; initialisation is fully determined by `config.seed`.
    pub fn new(config: &TrainConfig, node_count: usize) -> Result<Model, ModelError> {
        config.validate()?;
        let d = config.embed_dim;
        let k = config.mixture_components;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let with_time = !config.w_t;
        let obs = PathWeights::new(&mut params, "obs", node_count, d, config.gnn_layers, with_time, &mut rng)?;
        let miss = PathWeights::new(&mut params, "miss", node_count, d, config.gnn_layers, with_time, &mut rng)?;
        let heads = HeadSet::new(&mut params, d, node_count, &mut rng)?;
        let obs_tpp = MixtureHead::new(&mut params, "tpp.obs", 4 * d, d, k, &mut rng)?;
        let prior_tpp = MixtureHead::new(&mut params, "tpp.prior", 4 * d, d, k, &mut rng)?;
        let post_tpp = MixtureHead::new(&mut params, "tpp.post", 6 * d, d, k, &mut rng)?;
        Ok(Model {
            params,
            layout: Layout {
                dim: d,
                node_count,
                obs,
                miss,
                heads,
                obs_tpp,
                prior_tpp,
                post_tpp,
            },
            arch: ArchFingerprint::new(config, node_count),
        })
    }

    pub fn node_count(&self) -> usize {
        self.layout.node_count
    }

    pub fn initial_states(&self, start_time: f64) -> NodeStates {
        NodeStates::new(self.layout.node_count, self.layout.dim, start_time)
    }

    pub fn readout(&self, tape: &mut Tape<'_>, states: &NodeStates, vars: &StateVars) -> Result<Readout, ModelError> {
        let view = states.view(vars);
        Readout::build(tape, &self.layout.obs, &self.layout.miss, states, &view)
    }

    pub fn generator(&self) -> Generator<'_> {
        Generator {
            heads: &self.layout.heads,
            prior_tpp: &self.layout.prior_tpp,
            post_tpp: &self.layout.post_tpp,
        }
    }

    /// One time step: observed pass and GRU update, missing-event generation,
    /// missing pass and GRU update. `states` and `vars` advance in place.
    pub fn forward_step(
        &self,
        tape: &mut Tape<'_>,
        states: &mut NodeStates,
        vars: &mut StateVars,
        step: &TimeStep,
        opts: &StepOptions<'_>,
    ) -> Result<StepForward, ModelError> {
        let l = &self.layout;
        states.check_nodes(&step.observed)?;
        let pair_last: Vec<f64> = step.observed.iter().map(|e| states.last_obs_pair(e.u, e.v)).collect();
        let taus = step.observed.iter().zip(&pair_last).map(|(e, last)| e.t - last).collect();
        let pre = states.view(vars);

        let (nodes, x) = message_pass(tape, &l.obs, &step.observed, states.last_obs())?;
        evolve(tape, &l.obs.gru, &mut vars.o, &nodes, x)?;
        states.record_observed(&step.observed);

        let mut generation = None;
        let wants = match opts.missing {
            MissingMode::Off => false,
            _ => match opts.source {
                DrawSource::Live { .. } => crate::missing::draw_count(opts.q, step.observed.len())? > 0,
                DrawSource::Replay(d) => !d.is_empty(),
            },
        };
        if wants {
            let before = Readout::build(tape, &l.obs, &l.miss, states, &pre)?;
            let after = if opts.missing == MissingMode::Posterior {
                let view = states.view(vars);
                Some(Readout::build(tape, &l.obs, &l.miss, states, &view)?)
            } else {
                None
            };
            let input = GenerationInput {
                t: step.t,
                t_bar: step.t_bar,
                q: opts.q,
                n_observed: step.observed.len(),
                before: &before,
                after_observed: after.as_ref(),
                mc_samples: opts.mc_samples,
                normalize_truncation: opts.normalize_truncation,
            };
            let sampler = if opts.missing == MissingMode::Posterior {
                Sampler::Posterior
            } else {
                Sampler::Prior
            };
            let result = self.generator().generate(tape, &input, sampler, opts.source)?;
            if !result.missing.is_empty() {
                check_missing_window(&result.missing, step.t_bar, step.t)?;
                let (nodes, x) = message_pass(tape, &l.miss, &result.missing, states.last_miss())?;
                evolve(tape, &l.miss.gru, &mut vars.m, &nodes, x)?;
                states.record_missing(&result.missing);
            }
            generation = Some(result);
        }

        let current = states.view(vars);
        let scoring_view = pre.with_missing_from(&current);
        let scoring = Readout::build(tape, &l.obs, &l.miss, states, &scoring_view)?;
        Ok(StepForward {
            scoring,
            taus,
            pair_last,
            generation,
        })
    }

    /// Structure log-likelihood and time log-likelihood of the observed events.
    /// Events whose interval is not positive contribute no time term.
    pub fn observed_loglik(
        &self,
        tape: &mut Tape<'_>,
        step: &TimeStep,
        fwd: &StepForward,
    ) -> Result<(Var, Option<Var>), ModelError> {
        let pairs: Vec<(usize, usize)> = step.observed.iter().map(|e| (e.u, e.v)).collect();
        let structure = self.layout.heads.observed_structure_loglik(tape, &pairs, &fwd.scoring)?;
        let mut timed = Vec::with_capacity(pairs.len());
        let mut taus = Vec::with_capacity(pairs.len());
        for (p, &tau) in pairs.iter().zip(&fwd.taus) {
            if tau > 0.0 {
                timed.push(*p);
                taus.push(tau);
            } else {
                log::warn!("dropping time term for ({}, {}) at t={}: interval {tau}", p.0, p.1, step.t);
            }
        }
        if timed.is_empty() {
            return Ok((structure, None));
        }
        let ctx = fwd.scoring.pair_evolved(tape, &timed)?;
        let mix = self.layout.obs_tpp.forward(tape, ctx)?;
        let lp = mix.log_pdf(tape, &taus)?;
        Ok((structure, Some(tape.sum(lp))))
    }

    pub fn save<W: Write>(&self, w: W, config: &TrainConfig) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            arch: self.arch.clone(),
            config: config.clone(),
            config_fingerprint: config.fingerprint(),
        };
        write_checkpoint(w, &serde_json::to_string(&header)?, &self.params)?;
        Ok(())
    }

    /// Load a checkpoint and rebuild the model it describes.
    pub fn load<R: Read>(r: R) -> Result<(Model, CheckpointHeader), ModelError> {
        let ckpt = read_checkpoint(r)?;
        let header: CheckpointHeader =
            serde_json::from_str(&ckpt.header).map_err(|e| ModelError::Header(e.to_string()))?;
        let mut model = Model::new(&header.config, header.arch.node_count)?;
        if let Some((field, stored, requested)) = header.arch.first_difference(&model.arch) {
            return Err(ModelError::FingerprintMismatch {
                field,
                stored,
                requested,
            });
        }
        ckpt.apply_to(&mut model.params)?;
        Ok((model, header))
    }

    /// Load a checkpoint, requiring its layout to match `config` over `node_count` nodes.
    pub fn restore<R: Read>(r: R, config: &TrainConfig, node_count: usize) -> Result<Model, ModelError> {
        let ckpt = read_checkpoint(r)?;
        let header: CheckpointHeader =
            serde_json::from_str(&ckpt.header).map_err(|e| ModelError::Header(e.to_string()))?;
        let wanted = ArchFingerprint::new(config, node_count);
        if let Some((field, stored, requested)) = header.arch.first_difference(&wanted) {
            return Err(ModelError::FingerprintMismatch {
                field,
                stored,
                requested,
            });
        }
        let mut model = Model::new(config, node_count)?;
        ckpt.apply_to(&mut model.params)?;
        Ok(model)
    }
}
