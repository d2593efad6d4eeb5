//! Node-choice heads for the observed, prior and posterior processes.
//!
//! Each process factorises a pair as `p(u) p(v | u)`; every head is an MLP
//! onto `|V|` logits followed by a log-softmax.

use rand::Rng;

use crate::autodiff::nn::Mlp;
use crate::autodiff::{ParamStore, Tape, Var};
use crate::embeddings::Readout;
use crate::model::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Process {
    Observed,
    Prior,
    Posterior,
}

#[derive(Clone, Debug)]
pub struct HeadSet {
    pub obs_subject: Mlp,
    pub obs_object: Mlp,
    pub prior_subject: Mlp,
    pub prior_object: Mlp,
    pub post_subject: Mlp,
    pub post_object: Mlp,
    pub node_count: usize,
}

impl HeadSet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        node_count: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut mlp = |name: &str, width: usize| Mlp::new(store, name, width * dim, dim, node_count, rng);
        Ok(HeadSet {
            obs_subject: mlp("head.obs.subject", 4)?,
            obs_object: mlp("head.obs.object", 8)?,
            prior_subject: mlp("head.prior.subject", 4)?,
            prior_object: mlp("head.prior.object", 8)?,
            post_subject: mlp("head.post.subject", 6)?,
            post_object: mlp("head.post.object", 12)?,
            node_count,
        })
    }

    fn check(&self, nodes: &[usize]) -> Result<(), ModelError> {
        match nodes.iter().find(|&&n| n >= self.node_count) {
            Some(&node) => Err(ModelError::UnknownNode {
                node,
                count: self.node_count,
            }),
            None => Ok(()),
        }
    }

    /// Subject log-probabilities `[1, |V|]`.
    ///
    /// Observed and prior heads read `at.all_pool`; the posterior head also
    /// reads the observed pool of `current` (the view after this step's
    /// observed events).
    pub fn subject_logprobs(
        &self,
        tape: &mut Tape<'_>,
        process: Process,
        at: &Readout,
        current: Option<&Readout>,
    ) -> Result<Var, ModelError> {
        let logits = match process {
            Process::Observed => self.obs_subject.forward(tape, at.all_pool)?,
            Process::Prior => self.prior_subject.forward(tape, at.all_pool)?,
            Process::Posterior => {
                let cur = current.ok_or(ModelError::MissingReadout("posterior subject"))?;
                let ctx = tape.concat_cols(&[at.all_pool, cur.obs_pool])?;
                self.post_subject.forward(tape, ctx)?
            }
        };
        Ok(tape.log_softmax(logits))
    }

    /// Object log-probabilities given each subject in `us`, `[k, |V|]`.
    pub fn object_logprobs(
        &self,
        tape: &mut Tape<'_>,
        process: Process,
        us: &[usize],
        at: &Readout,
        current: Option<&Readout>,
    ) -> Result<Var, ModelError> {
        self.check(us)?;
        let gu = at.node_rows(tape, us)?;
        let gt = Readout::repeat(tape, at.all_pool, us.len())?;
        let logits = match process {
            Process::Observed => {
                let ctx = tape.concat_cols(&[gu, gt])?;
                self.obs_object.forward(tape, ctx)?
            }
            Process::Prior => {
                let ctx = tape.concat_cols(&[gu, gt])?;
                self.prior_object.forward(tape, ctx)?
            }
            Process::Posterior => {
                let cur = current.ok_or(ModelError::MissingReadout("posterior object"))?;
                let ou = cur.obs_rows(tape, us)?;
                let ot = Readout::repeat(tape, cur.obs_pool, us.len())?;
                let ctx = tape.concat_cols(&[gu, gt, ou, ot])?;
                self.post_object.forward(tape, ctx)?
            }
        };
        Ok(tape.log_softmax(logits))
    }

    /// `sum_i log p(u_i) + log p(v_i | u_i)` under the observed process, `[1,1]`.
    pub fn observed_structure_loglik(
        &self,
        tape: &mut Tape<'_>,
        pairs: &[(usize, usize)],
        at: &Readout,
    ) -> Result<Var, ModelError> {
        let us: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let vs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        self.check(&vs)?;
        let subject = self.subject_logprobs(tape, Process::Observed, at, None)?;
        let object = self.object_logprobs(tape, Process::Observed, &us, at, None)?;
        let su = tape.pick(subject, &us.iter().map(|&u| (0, u)).collect::<Vec<_>>())?;
        let ov = tape.pick(object, &vs.iter().enumerate().map(|(i, &v)| (i, v)).collect::<Vec<_>>())?;
        let a = tape.sum(su);
        let b = tape.sum(ov);
        Ok(tape.add(a, b)?)
    }
}
