//! Missing-event generation for one step and its KL penalty.
//!
//! `round(Q * |O_t|)` draws run independently against frozen readouts: a
//! subject from the posterior subject head, an object from the posterior
//! object head, and an interval from the posterior time density truncated to
//! `(0, t - t_bar)`. A draw whose window holds almost none of that density
//! is placed uniformly and contributes no time KL. Each draw owns an RNG
//! derived from the step seed and its index, so results do not depend on
//! draw order.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::embeddings::Readout;
use crate::heads::{HeadSet, Process};
use crate::model::ModelError;
use crate::stream::Event;
use crate::tpp::{categorical_kl_rows, MixtureHead, MixtureVars, TppError};

pub use crate::config::{adaptive_q, QStrategy};

/// One generated event with the Monte Carlo samples used for its time KL.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub u: usize,
    pub v: usize,
    pub delta: f64,
    pub kl_samples: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum DrawSource<'a> {
    /// Fresh draws from per-draw RNGs seeded by `seed`.
    Live { seed: u64 },
    /// Re-use recorded draws; densities are re-evaluated on the current tape.
    Replay(&'a [Draw]),
}

/// Which process the events are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    /// Posterior draws with the KL against the prior.
    Posterior,
    /// Prior draws, no KL.
    Prior,
}

pub struct GenerationInput<'r> {
    pub t: f64,
    pub t_bar: f64,
    pub q: f64,
    pub n_observed: usize,
    /// Readout with states through `t_bar`.
    pub before: &'r Readout,
    /// Readout after this step's observed events; required for the posterior.
    pub after_observed: Option<&'r Readout>,
    pub mc_samples: usize,
    pub normalize_truncation: bool,
}

pub struct GenerationResult {
    pub missing: Vec<Event>,
    pub draws: Vec<Draw>,
    /// `[1,1]` KL total; `None` when nothing was drawn or sampling from the prior.
    pub kl: Option<Var>,
}

/// `round(q * n)` with halves rounded up.
pub fn draw_count(q: f64, n_observed: usize) -> Result<usize, ModelError> {
    if !(q >= 0.0 && q.is_finite()) {
        return Err(ModelError::NegativeRatio(q));
    }
    Ok((q * n_observed as f64 + 0.5).floor() as usize)
}

/// SplitMix64 finaliser; derives independent per-draw seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_row<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

pub struct Generator<'m> {
    pub heads: &'m HeadSet,
    pub prior_tpp: &'m MixtureHead,
    pub post_tpp: &'m MixtureHead,
}

impl Generator<'_> {
    pub fn generate(
        &self,
        tape: &mut Tape<'_>,
        input: &GenerationInput<'_>,
        sampler: Sampler,
        source: DrawSource<'_>,
    ) -> Result<GenerationResult, ModelError> {
        if !(input.t > input.t_bar) {
            return Err(ModelError::DegenerateWindow {
                t: input.t,
                t_bar: input.t_bar,
            });
        }
        let n = match source {
            DrawSource::Live { .. } => draw_count(input.q, input.n_observed)?,
            DrawSource::Replay(draws) => draws.len(),
        };
        if n == 0 {
            return Ok(GenerationResult {
                missing: Vec::new(),
                draws: Vec::new(),
                kl: None,
            });
        }
        let mut rngs: Vec<ChaCha8Rng> = match source {
            DrawSource::Live { seed } => (0..n as u64).map(|i| ChaCha8Rng::seed_from_u64(mix_seed(seed, i))).collect(),
            DrawSource::Replay(_) => Vec::new(),
        };
        let replay = match source {
            DrawSource::Replay(d) => Some(d),
            DrawSource::Live { .. } => None,
        };
        let posterior = sampler == Sampler::Posterior;
        let current = if posterior {
            Some(input.after_observed.ok_or(ModelError::MissingReadout("posterior generation"))?)
        } else {
            None
        };
        let before = input.before;
        let upper = input.t - input.t_bar;

        let log_p_s = self.heads.subject_logprobs(tape, Process::Prior, before, None)?;
        let log_q_s = if posterior {
            Some(self.heads.subject_logprobs(tape, Process::Posterior, before, current)?)
        } else {
            None
        };
        let subject_dist = log_q_s.unwrap_or(log_p_s);
        let us: Vec<usize> = match replay {
            Some(d) => d.iter().map(|d| d.u).collect(),
            None => {
                let row = tape.row(subject_dist, 0).to_vec();
                rngs.iter_mut().map(|r| sample_row(&row, r)).collect()
            }
        };

        let log_p_o = self.heads.object_logprobs(tape, Process::Prior, &us, before, None)?;
        let log_q_o = if posterior {
            Some(self.heads.object_logprobs(tape, Process::Posterior, &us, before, current)?)
        } else {
            None
        };
        let object_dist = log_q_o.unwrap_or(log_p_o);
        let vs: Vec<usize> = match replay {
            Some(d) => d.iter().map(|d| d.v).collect(),
            None => (0..n)
                .map(|i| {
                    let row = tape.row(object_dist, i).to_vec();
                    sample_row(&row, &mut rngs[i])
                })
                .collect(),
        };
        let pairs: Vec<(usize, usize)> = us.iter().copied().zip(vs.iter().copied()).collect();

        let prior_ctx = before.pair_evolved(tape, &pairs)?;
        let prior_time = self.prior_tpp.forward(tape, prior_ctx)?;
        let time_dist = if posterior {
            let cur = current.expect("checked above");
            let obs_now = cur.pair_obs_evolved(tape, &pairs)?;
            let ctx = tape.concat_cols(&[prior_ctx, obs_now])?;
            Some(self.post_tpp.forward(tape, ctx)?)
        } else {
            None
        };
        let sampling: MixtureVars = time_dist.unwrap_or(prior_time);
        let mc = if posterior { input.mc_samples } else { 0 };

        let mut draws = Vec::with_capacity(n);
        for i in 0..n {
            let draw = match replay {
                Some(d) => d[i].clone(),
                None => {
                    let params = sampling.params(tape, i)?;
                    let rng = &mut rngs[i];
                    let (delta, kl_samples) = match params.sample_truncated(upper, rng) {
                        Ok(delta) => {
                            let kl = (0..mc)
                                .map(|_| params.sample_truncated(upper, rng))
                                .collect::<Result<Vec<_>, _>>()?;
                            (delta, kl)
                        }
                        Err(TppError::WindowMassUnderflow { log_mass, .. }) => {
                            log::warn!(
                                "window ({}, {}) holds e^{log_mass:.1} of the time density for ({}, {}); placing uniformly",
                                input.t_bar,
                                input.t,
                                us[i],
                                vs[i]
                            );
                            (rng.random::<f64>() * upper, Vec::new())
                        }
                        Err(e) => return Err(e.into()),
                    };
                    Draw {
                        u: us[i],
                        v: vs[i],
                        delta,
                        kl_samples,
                    }
                }
            };
            draws.push(draw);
        }
        let missing = draws
            .iter()
            .map(|d| {
                let mut tp = input.t_bar + d.delta;
                if tp <= input.t_bar {
                    tp = input.t_bar.next_up();
                }
                if tp >= input.t {
                    tp = input.t.next_down();
                }
                Event::missing(d.u, d.v, tp)
            })
            .collect();

        let kl = match (log_q_s, log_q_o, time_dist) {
            (Some(lqs), Some(lqo), Some(q_time)) => {
                let subj = categorical_kl_rows(tape, lqs, log_p_s)?;
                let subj = tape.scale(subj, n as f64);
                let obj = categorical_kl_rows(tape, lqo, log_p_o)?;
                let obj = tape.sum(obj);
                let time = self.time_kl(tape, &draws, q_time, prior_time, upper, input.normalize_truncation)?;
                let total = tape.add(subj, obj)?;
                Some(match time {
                    Some(time) => tape.add(total, time)?,
                    None => total,
                })
            }
            _ => None,
        };
        Ok(GenerationResult { missing, draws, kl })
    }

    /// `sum_i mean_j [ln q(s_ij) - ln p(s_ij)]`, `[1,1]`.
    fn time_kl(
        &self,
        tape: &mut Tape<'_>,
        draws: &[Draw],
        q: MixtureVars,
        p: MixtureVars,
        upper: f64,
        normalize: bool,
    ) -> Result<Option<Var>, ModelError> {
        let mut rows = Vec::new();
        let mut samples = Vec::new();
        let mut weights = Vec::new();
        for (i, d) in draws.iter().enumerate() {
            let w = 1.0 / d.kl_samples.len().max(1) as f64;
            for &s in &d.kl_samples {
                rows.push(i);
                samples.push(s);
                weights.push(w);
            }
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let qr = q.gather(tape, &rows)?;
        let pr = p.gather(tape, &rows)?;
        let lq = if normalize {
            let uppers = vec![upper; samples.len()];
            qr.truncated_log_pdf(tape, &samples, &uppers)?
        } else {
            qr.log_pdf(tape, &samples)?
        };
        let lp = pr.log_pdf(tape, &samples)?;
        let diff = tape.sub(lq, lp)?;
        let weighted = tape.mul_const(diff, &weights)?;
        Ok(Some(tape.sum(weighted)))
    }
}

pub const TRACE_HEADER: &str = "step,u,v,t_prime";

/// Append generated events for `step` as `step,u,v,t_prime` rows.
pub fn write_trace<W: Write>(mut w: W, step: usize, events: &[Event]) -> Result<(), ModelError> {
    for e in events {
        writeln!(w, "{step},{},{},{}", e.u, e.v, e.t)?;
    }
    Ok(())
}
