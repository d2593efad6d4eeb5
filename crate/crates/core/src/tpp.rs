//! Log-normal mixture point process over positive inter-event intervals.
//!
//! [`MixtureParams`] holds plain values for sampling and prediction;
//! [`MixtureHead`] produces the same parameters on a tape, batched over rows,
//! so densities and KL terms can be differentiated.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::nn::Mlp;
use crate::autodiff::special::{log_ndtr, ndtr, ndtri, HALF_LN_2PI};
use crate::autodiff::{logsumexp, AutodiffError, ParamStore, Tape, Tensor, Var};

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e3;
/// Stand-in for `ln 0` when an interval falls outside a truncation window.
pub const OUTSIDE_WINDOW: f64 = -1e30;
/// Smallest window mass a truncated density may be normalised by.
pub const MIN_WINDOW_MASS: f64 = 1e-12;
/// Largest exponent `mu + sigma^2/2` evaluated before the mean saturates.
pub const MAX_MEAN_EXPONENT: f64 = 700.0;

#[derive(Debug, Error)]
pub enum TppError {
    #[error("interval must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error("truncation window must be positive, got {0}")]
    NonPositiveWindow(f64),
    #[error("window (0, {upper}) holds mass exp({log_mass}) below the trainable minimum")]
    WindowMassUnderflow { upper: f64, log_mass: f64 },
    #[error("invalid mixture parameters: {0}")]
    InvalidParams(String),
    #[error("categorical distributions differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least one Monte Carlo sample")]
    NoSamples,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// `(omega, mu, sigma)` of a K-component log-normal mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self, TppError> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return Err(TppError::InvalidParams(format!(
                "component counts {} / {} / {}",
                k,
                means.len(),
                stds.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TppError::InvalidParams("weights must form a simplex".into()));
        }
        if means.iter().any(|m| !m.is_finite()) || stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(TppError::InvalidParams("means must be finite and stds positive".into()));
        }
        Ok(MixtureParams { weights, means, stds })
    }

    /// Single log-normal component.
    pub fn single(mean: f64, std: f64) -> Result<Self, TppError> {
        Self::new(vec![1.0], vec![mean], vec![std])
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn components(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&w, &m), &s)| (w, m, s))
    }

    pub fn log_pdf(&self, tau: f64) -> Result<f64, TppError> {
        if !(tau > 0.0) {
            return Err(TppError::NonPositiveInterval(tau));
        }
        let lt = tau.ln();
        let terms: Vec<f64> = self
            .components()
            .map(|(w, m, s)| {
                let z = (lt - m) / s;
                w.ln() - s.ln() - lt - HALF_LN_2PI - 0.5 * z * z
            })
            .collect();
        Ok(logsumexp(&terms))
    }

    pub fn pdf(&self, tau: f64) -> Result<f64, TppError> {
        self.log_pdf(tau).map(f64::exp)
    }

    pub fn cdf(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let lt = tau.ln();
        self.components().map(|(w, m, s)| w * ndtr((lt - m) / s)).sum()
    }

    /// `ln P(tau < upper)`.
    pub fn log_window_mass(&self, upper: f64) -> Result<f64, TppError> {
        if !(upper > 0.0) {
            return Err(TppError::NonPositiveWindow(upper));
        }
        let lu = upper.ln();
        let terms: Vec<f64> = self
            .components()
            .map(|(w, m, s)| w.ln() + log_ndtr((lu - m) / s))
            .collect();
        Ok(logsumexp(&terms))
    }

    fn checked_log_mass(&self, upper: f64) -> Result<f64, TppError> {
        let log_mass = self.log_window_mass(upper)?;
        if log_mass < MIN_WINDOW_MASS.ln() {
            return Err(TppError::WindowMassUnderflow { upper, log_mass });
        }
        Ok(log_mass)
    }

    /// Density renormalised to `(0, upper)`; [`OUTSIDE_WINDOW`] when `delta >= upper`.
    pub fn truncated_log_pdf(&self, delta: f64, upper: f64) -> Result<f64, TppError> {
        let log_mass = self.checked_log_mass(upper)?;
        if delta >= upper {
            return Ok(OUTSIDE_WINDOW);
        }
        Ok(self.log_pdf(delta)? - log_mass)
    }

    /// Indicator-times-density form without renormalisation.
    pub fn truncated_log_pdf_unnormalized(&self, delta: f64, upper: f64) -> Result<f64, TppError> {
        if !(upper > 0.0) {
            return Err(TppError::NonPositiveWindow(upper));
        }
        if delta >= upper {
            return Ok(OUTSIDE_WINDOW);
        }
        self.log_pdf(delta)
    }

    /// `sum_k omega_k exp(mu_k + sigma_k^2 / 2)`, saturating large exponents.
    pub fn expectation(&self) -> f64 {
        let mut saturated = false;
        let total = self
            .components()
            .map(|(w, m, s)| {
                let e = m + 0.5 * s * s;
                if e > MAX_MEAN_EXPONENT {
                    saturated = true;
                }
                w * e.min(MAX_MEAN_EXPONENT).exp()
            })
            .sum();
        if saturated {
            log::warn!("mixture mean saturated at exp({MAX_MEAN_EXPONENT})");
        }
        total
    }

    fn pick_component<R: Rng + ?Sized>(weights: impl Iterator<Item = f64>, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (k, w) in weights.enumerate() {
            if w > 0.0 {
                last = k;
            }
            acc += w;
            if u < acc {
                return k;
            }
        }
        last
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = Self::pick_component(self.weights.iter().copied(), rng);
        let z: f64 = rng.sample(StandardNormal);
        (self.means[k] + self.stds[k] * z).exp()
    }

    /// Draw from the mixture restricted to `(0, upper)`: components are
    /// reweighted by their in-window mass, then inverted through the normal CDF.
    pub fn sample_truncated<R: Rng + ?Sized>(&self, upper: f64, rng: &mut R) -> Result<f64, TppError> {
        let log_mass = self.checked_log_mass(upper)?;
        let lu = upper.ln();
        let log_in: Vec<f64> = self
            .components()
            .map(|(_, m, s)| log_ndtr((lu - m) / s))
            .collect();
        let weights = self
            .weights
            .iter()
            .zip(&log_in)
            .map(|(w, li)| (w.ln() + li - log_mass).exp());
        let k = Self::pick_component(weights, rng);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let p = (u.ln() + log_in[k]).exp();
        let x = (self.means[k] + self.stds[k] * ndtri(p)).min(lu);
        let delta = x.exp().max(f64::MIN_POSITIVE);
        Ok(if delta >= upper { upper.next_down() } else { delta })
    }
}

/// `sum q log(q / p)` with `0 log 0 = 0`; `+inf` (with a warning) when `q > 0 = p`.
pub fn categorical_kl(q: &[f64], p: &[f64]) -> Result<f64, TppError> {
    if q.len() != p.len() {
        return Err(TppError::LengthMismatch(q.len(), p.len()));
    }
    let mut kl = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi <= 0.0 {
            continue;
        }
        if pi <= 0.0 {
            log::warn!("categorical KL is infinite: q={qi} where p=0");
            return Ok(f64::INFINITY);
        }
        kl += qi * (qi / pi).ln();
    }
    Ok(kl)
}

/// Monte Carlo `KL(q || p)` with `n` draws from `q`, truncated to `(0, upper)` when given.
pub fn mc_kl<R: Rng + ?Sized>(
    q: &MixtureParams,
    q_upper: Option<f64>,
    p: &MixtureParams,
    n: usize,
    rng: &mut R,
) -> Result<f64, TppError> {
    if n == 0 {
        return Err(TppError::NoSamples);
    }
    let mut total = 0.0;
    for _ in 0..n {
        let (delta, lq) = match q_upper {
            Some(upper) => {
                let d = q.sample_truncated(upper, rng)?;
                (d, q.truncated_log_pdf(d, upper)?)
            }
            None => {
                let d = q.sample(rng);
                (d, q.log_pdf(d)?)
            }
        };
        total += lq - p.log_pdf(delta)?;
    }
    Ok(total / n as f64)
}

/// Tape handles for a batch of mixtures, one row per context.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub log_weights: Var,
    pub means: Var,
    pub log_stds: Var,
}

impl MixtureVars {
    pub fn rows(&self, tape: &Tape<'_>) -> usize {
        tape.shape(self.means).0
    }

    pub fn params(&self, tape: &Tape<'_>, row: usize) -> Result<MixtureParams, TppError> {
        let mut weights: Vec<f64> = tape.row(self.log_weights, row).iter().map(|l| l.exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let stds = tape.row(self.log_stds, row).iter().map(|l| l.exp()).collect();
        MixtureParams::new(weights, tape.row(self.means, row).to_vec(), stds)
    }

    /// Repeat rows: row `i` of the result is row `idx[i]` of `self`.
    pub fn gather(&self, tape: &mut Tape<'_>, idx: &[usize]) -> Result<MixtureVars, TppError> {
        Ok(MixtureVars {
            log_weights: tape.gather_rows(self.log_weights, idx)?,
            means: tape.gather_rows(self.means, idx)?,
            log_stds: tape.gather_rows(self.log_stds, idx)?,
        })
    }

    /// Standardised log-interval `(ln x_i - mu) / sigma` for each row `i`.
    fn standardize(&self, tape: &mut Tape<'_>, log_x: &[f64]) -> Result<Var, TppError> {
        let (n, k) = tape.shape(self.means);
        if log_x.len() != n {
            return Err(AutodiffError::shape("mixture intervals", (n, 1), (log_x.len(), 1)).into());
        }
        let lx = tape.constant_matrix(n, k, log_x.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect())?;
        let centred = tape.sub(lx, self.means)?;
        let neg_log_std = tape.neg(self.log_stds);
        let inv_std = tape.exp(neg_log_std);
        Ok(tape.mul(centred, inv_std)?)
    }

    /// Per-row log-density at `tau_i`, shape `[n,1]`.
    pub fn log_pdf(&self, tape: &mut Tape<'_>, taus: &[f64]) -> Result<Var, TppError> {
        if let Some(&bad) = taus.iter().find(|t| !(**t > 0.0)) {
            return Err(TppError::NonPositiveInterval(bad));
        }
        let log_taus: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
        let z = self.standardize(tape, &log_taus)?;
        let z2 = tape.square(z);
        let half_z2 = tape.scale(z2, -0.5);
        let a = tape.sub(self.log_weights, self.log_stds)?;
        let a = tape.add(a, half_z2)?;
        let k = tape.shape(self.means).1;
        let shift: Vec<f64> = log_taus
            .iter()
            .flat_map(|&lt| std::iter::repeat_n(-lt - HALF_LN_2PI, k))
            .collect();
        let shift = tape.constant_matrix(taus.len(), k, shift)?;
        let terms = tape.add(a, shift)?;
        Ok(tape.logsumexp(terms))
    }

    /// Per-row `ln P(tau < upper_i)`, shape `[n,1]`.
    pub fn log_window_mass(&self, tape: &mut Tape<'_>, uppers: &[f64]) -> Result<Var, TppError> {
        if let Some(&bad) = uppers.iter().find(|u| !(**u > 0.0)) {
            return Err(TppError::NonPositiveWindow(bad));
        }
        let log_u: Vec<f64> = uppers.iter().map(|u| u.ln()).collect();
        let z = self.standardize(tape, &log_u)?;
        let lcdf = tape.log_ndtr(z);
        let terms = tape.add(self.log_weights, lcdf)?;
        let mass = tape.logsumexp(terms);
        if let Some((i, &lm)) = tape
            .value(mass)
            .iter()
            .enumerate()
            .find(|(_, lm)| **lm < MIN_WINDOW_MASS.ln())
        {
            return Err(TppError::WindowMassUnderflow {
                upper: uppers[i],
                log_mass: lm,
            });
        }
        Ok(mass)
    }

    /// Per-row log-density renormalised to `(0, upper_i)`. Every `delta_i`
    /// must already lie inside its window.
    pub fn truncated_log_pdf(&self, tape: &mut Tape<'_>, deltas: &[f64], uppers: &[f64]) -> Result<Var, TppError> {
        if let Some((d, u)) = deltas.iter().zip(uppers).find(|(d, u)| d >= u) {
            return Err(TppError::InvalidParams(format!("interval {d} outside window (0, {u})")));
        }
        let lp = self.log_pdf(tape, deltas)?;
        let lm = self.log_window_mass(tape, uppers)?;
        Ok(tape.sub(lp, lm)?)
    }
}

/// Three one-hidden-layer MLP branches mapping a context to `(omega, mu, ln sigma)`.
#[derive(Clone, Copy, Debug)]
pub struct MixtureHead {
    pub weight: Mlp,
    pub mean: Mlp,
    pub log_std: Mlp,
    pub components: usize,
}

impl MixtureHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        components: usize,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        Ok(MixtureHead {
            weight: Mlp::new(store, &format!("{name}.weight"), in_dim, hidden_dim, components, rng)?,
            mean: Mlp::new(store, &format!("{name}.mean"), in_dim, hidden_dim, components, rng)?,
            log_std: Mlp::new(store, &format!("{name}.log_std"), in_dim, hidden_dim, components, rng)?,
            components,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.in_dim()
    }

    /// `context[n, in] -> MixtureVars` with `n` rows.
    pub fn forward(&self, tape: &mut Tape<'_>, context: Var) -> Result<MixtureVars, TppError> {
        tape.check_finite(context, "mixture context")?;
        let logits = self.weight.forward(tape, context)?;
        let log_weights = tape.log_softmax(logits);
        let means = self.mean.forward(tape, context)?;
        let raw = self.log_std.forward(tape, context)?;
        let log_stds = tape.clamp(raw, SIGMA_MIN.ln(), SIGMA_MAX.ln());
        Ok(MixtureVars {
            log_weights,
            means,
            log_stds,
        })
    }

    /// Untracked evaluation for a single context row.
    pub fn params_for(&self, store: &ParamStore, context: &[f64]) -> Result<MixtureParams, TppError> {
        let mut tape = Tape::new(store);
        let c = tape.constant(&Tensor::row(context.to_vec()));
        let vars = self.forward(&mut tape, c)?;
        vars.params(&tape, 0)
    }
}

/// Row-wise `KL(q || p)` between categorical distributions given as log-probabilities, `[n,1]`.
pub fn categorical_kl_rows(tape: &mut Tape<'_>, log_q: Var, log_p: Var) -> Result<Var, TppError> {
    let q = tape.exp(log_q);
    let diff = tape.sub(log_q, log_p)?;
    let terms = tape.mul(q, diff)?;
    Ok(tape.row_sum(terms))
}
