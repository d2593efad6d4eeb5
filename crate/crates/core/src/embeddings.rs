//! Node embeddings: static vectors, evolving GRU states, time-aware message
//! passing over one step's events, and max-pooled graph readouts.
//!
//! Value-level state lives in [`NodeStates`] and survives across tapes.
//! Inside a tape, [`StateVars`] maps every node to the tape row currently
//! holding its evolved vectors; a [`View`] freezes that mapping so readouts
//! can be taken at a chosen point within a step.

use std::io::Write;

use rand::Rng;

use crate::autodiff::nn::GruCell;
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::model::ModelError;
use crate::stream::Event;

/// Static embedding init std.
pub const STATIC_INIT_STD: f64 = 0.1;

/// A single row on a tape.
pub type RowRef = (Var, usize);

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub self_w: ParamId,
    pub neigh_w: ParamId,
    /// `[1, d]` interval weight; absent when intervals are ablated.
    pub time_w: Option<ParamId>,
}

/// Parameters of one path (observed or missing).
#[derive(Clone, Debug)]
pub struct PathWeights {
    pub static_emb: ParamId,
    pub layers: Vec<LayerWeights>,
    pub gru: GruCell,
}

impl PathWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        node_count: usize,
        dim: usize,
        layers: usize,
        with_time: bool,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let static_emb = store.add_gaussian(format!("{name}.static"), vec![node_count, dim], STATIC_INIT_STD, rng)?;
        let layers = (0..layers)
            .map(|l| {
                Ok(LayerWeights {
                    self_w: store.add_weight(format!("{name}.layer{l}.self"), dim, dim, rng)?,
                    neigh_w: store.add_weight(format!("{name}.layer{l}.neigh"), dim, dim, rng)?,
                    time_w: if with_time {
                        Some(store.add_weight(format!("{name}.layer{l}.time"), 1, dim, rng)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<_, ModelError>>()?;
        let gru = GruCell::new(store, &format!("{name}.gru"), dim, dim, rng)?;
        Ok(PathWeights {
            static_emb,
            layers,
            gru,
        })
    }
}

/// Value-level per-node state carried between tapes.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStates {
    dim: usize,
    evolved_o: Vec<f64>,
    evolved_m: Vec<f64>,
    last_obs: Vec<f64>,
    last_miss: Vec<f64>,
    seen_obs: Vec<usize>,
    seen_miss: Vec<usize>,
    obs_flag: Vec<bool>,
    miss_flag: Vec<bool>,
}

impl NodeStates {
    /// Zero evolved states; last-involvement times one unit before `start_time`.
    pub fn new(node_count: usize, dim: usize, start_time: f64) -> Self {
        NodeStates {
            dim,
            evolved_o: vec![0.0; node_count * dim],
            evolved_m: vec![0.0; node_count * dim],
            last_obs: vec![start_time - 1.0; node_count],
            last_miss: vec![start_time - 1.0; node_count],
            seen_obs: Vec::new(),
            seen_miss: Vec::new(),
            obs_flag: vec![false; node_count],
            miss_flag: vec![false; node_count],
        }
    }

    pub fn node_count(&self) -> usize {
        self.last_obs.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn evolved_o(&self, u: usize) -> &[f64] {
        &self.evolved_o[u * self.dim..(u + 1) * self.dim]
    }

    pub fn evolved_m(&self, u: usize) -> &[f64] {
        &self.evolved_m[u * self.dim..(u + 1) * self.dim]
    }

    pub fn last_obs(&self) -> &[f64] {
        &self.last_obs
    }

    pub fn last_miss(&self) -> &[f64] {
        &self.last_miss
    }

    /// `max(last_obs[u], last_obs[v])`
    pub fn last_obs_pair(&self, u: usize, v: usize) -> f64 {
        self.last_obs[u].max(self.last_obs[v])
    }

    pub fn seen_obs(&self) -> &[usize] {
        &self.seen_obs
    }

    pub fn seen_miss(&self) -> &[usize] {
        &self.seen_miss
    }

    pub fn check_nodes(&self, events: &[Event]) -> Result<(), ModelError> {
        let count = self.node_count();
        match events.iter().flat_map(|e| [e.u, e.v]).find(|&n| n >= count) {
            Some(node) => Err(ModelError::UnknownNode { node, count }),
            None => Ok(()),
        }
    }

    /// Put evolved states on `tape` as constants.
    pub fn attach(&self, tape: &mut Tape<'_>) -> StateVars {
        let n = self.node_count();
        let o = tape.constant(&Tensor::new(vec![n, self.dim], self.evolved_o.clone()).expect("state shape"));
        let m = tape.constant(&Tensor::new(vec![n, self.dim], self.evolved_m.clone()).expect("state shape"));
        StateVars {
            o: (0..n).map(|i| (o, i)).collect(),
            m: (0..n).map(|i| (m, i)).collect(),
        }
    }

    /// Copy current tape values back; the tape may be dropped afterwards.
    pub fn detach(&mut self, tape: &Tape<'_>, vars: &StateVars) {
        let d = self.dim;
        for (u, &(var, row)) in vars.o.iter().enumerate() {
            self.evolved_o[u * d..(u + 1) * d].copy_from_slice(tape.row(var, row));
        }
        for (u, &(var, row)) in vars.m.iter().enumerate() {
            self.evolved_m[u * d..(u + 1) * d].copy_from_slice(tape.row(var, row));
        }
    }

    /// Record an observed step: last times move to `t`, nodes join the seen set.
    pub fn record_observed(&mut self, events: &[Event]) {
        for e in events {
            for n in [e.u, e.v] {
                self.last_obs[n] = self.last_obs[n].max(e.t);
                if !self.obs_flag[n] {
                    self.obs_flag[n] = true;
                    self.seen_obs.push(n);
                }
            }
        }
    }

    /// Record generated events: last times move to the latest `t'` per node.
    pub fn record_missing(&mut self, events: &[Event]) {
        for e in events {
            for n in [e.u, e.v] {
                self.last_miss[n] = self.last_miss[n].max(e.t);
                if !self.miss_flag[n] {
                    self.miss_flag[n] = true;
                    self.seen_miss.push(n);
                }
            }
        }
    }

    pub fn view(&self, vars: &StateVars) -> View {
        View {
            o: vars.o.clone(),
            m: vars.m.clone(),
            obs_len: self.seen_obs.len(),
            miss_len: self.seen_miss.len(),
        }
    }
}

/// Tape rows holding every node's evolved observed and missing state.
#[derive(Clone, Debug)]
pub struct StateVars {
    pub o: Vec<RowRef>,
    pub m: Vec<RowRef>,
}

/// Frozen state mapping plus seen-set sizes at one point in a step.
#[derive(Clone, Debug)]
pub struct View {
    pub o: Vec<RowRef>,
    pub m: Vec<RowRef>,
    pub obs_len: usize,
    pub miss_len: usize,
}

impl View {
    /// Observed rows from `self`, missing rows and seen-missing size from `other`.
    pub fn with_missing_from(&self, other: &View) -> View {
        View {
            o: self.o.clone(),
            m: other.m.clone(),
            obs_len: self.obs_len,
            miss_len: other.miss_len,
        }
    }
}

/// Per-node and pooled embeddings for one view.
///
/// Node rows are `g_u = [o_u ; o*_u ; m_u ; m*_u]` (width `4d`); the first
/// half is the observed part `[o_u ; o*_u]`, the second the missing part.
#[derive(Clone, Copy, Debug)]
pub struct Readout {
    pub nodes: Var,
    /// `[o*_u ; m*_u]`, width `2d`.
    pub evolved: Var,
    /// Max over observed-seen nodes of `[o_u ; o*_u]`, `[1, 2d]`.
    pub obs_pool: Var,
    /// Max over missing-seen nodes of `[m_u ; m*_u]`, `[1, 2d]`.
    pub miss_pool: Var,
    /// Max over nodes seen in either of `g_u`, `[1, 4d]`.
    pub all_pool: Var,
    pub dim: usize,
}

/// Element-wise max over the listed rows; zero row when the set is empty.
pub fn pool_rows(tape: &mut Tape<'_>, x: Var, rows: &[usize]) -> Result<Var, ModelError> {
    if rows.is_empty() {
        let cols = tape.shape(x).1;
        return Ok(tape.zeros(1, cols));
    }
    let g = tape.gather_rows(x, rows)?;
    Ok(tape.max_rows(g)?)
}

impl Readout {
    pub fn build(
        tape: &mut Tape<'_>,
        obs: &PathWeights,
        miss: &PathWeights,
        states: &NodeStates,
        view: &View,
    ) -> Result<Readout, ModelError> {
        let d = states.dim;
        let so = tape.param(obs.static_emb);
        let sm = tape.param(miss.static_emb);
        let eo = tape.stack_rows(&view.o, d)?;
        let em = tape.stack_rows(&view.m, d)?;
        let obs_part = tape.concat_cols(&[so, eo])?;
        let miss_part = tape.concat_cols(&[sm, em])?;
        let nodes = tape.concat_cols(&[obs_part, miss_part])?;
        let evolved = tape.concat_cols(&[eo, em])?;
        let seen_obs = &states.seen_obs[..view.obs_len];
        let seen_miss = &states.seen_miss[..view.miss_len];
        let mut any = vec![false; states.node_count()];
        let seen_any: Vec<usize> = seen_obs
            .iter()
            .chain(seen_miss)
            .copied()
            .filter(|&n| !std::mem::replace(&mut any[n], true))
            .collect();
        Ok(Readout {
            obs_pool: pool_rows(tape, obs_part, seen_obs)?,
            miss_pool: pool_rows(tape, miss_part, seen_miss)?,
            all_pool: pool_rows(tape, nodes, &seen_any)?,
            nodes,
            evolved,
            dim: d,
        })
    }

    /// `g_u` rows for the given nodes, `[k, 4d]`.
    pub fn node_rows(&self, tape: &mut Tape<'_>, nodes: &[usize]) -> Result<Var, ModelError> {
        Ok(tape.gather_rows(self.nodes, nodes)?)
    }

    /// `[o_u ; o*_u]` rows, `[k, 2d]`.
    pub fn obs_rows(&self, tape: &mut Tape<'_>, nodes: &[usize]) -> Result<Var, ModelError> {
        let g = tape.gather_rows(self.nodes, nodes)?;
        Ok(tape.slice_cols(g, 0, 2 * self.dim)?)
    }

    /// `[g*_u ; g*_v]` per pair, `[k, 4d]`.
    pub fn pair_evolved(&self, tape: &mut Tape<'_>, pairs: &[(usize, usize)]) -> Result<Var, ModelError> {
        let us: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let vs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = tape.gather_rows(self.evolved, &us)?;
        let b = tape.gather_rows(self.evolved, &vs)?;
        Ok(tape.concat_cols(&[a, b])?)
    }

    /// `[o*_u ; o*_v]` per pair, `[k, 2d]`.
    pub fn pair_obs_evolved(&self, tape: &mut Tape<'_>, pairs: &[(usize, usize)]) -> Result<Var, ModelError> {
        let us: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let vs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = tape.gather_rows(self.evolved, &us)?;
        let a = tape.slice_cols(a, 0, self.dim)?;
        let b = tape.gather_rows(self.evolved, &vs)?;
        let b = tape.slice_cols(b, 0, self.dim)?;
        Ok(tape.concat_cols(&[a, b])?)
    }

    /// Repeat a `[1, w]` pooled row `k` times.
    pub fn repeat(tape: &mut Tape<'_>, pooled: Var, k: usize) -> Result<Var, ModelError> {
        Ok(tape.gather_rows(pooled, &vec![0; k])?)
    }
}

/// Involved nodes (first-appearance order) and the layer-`L` embeddings for one
/// step's events under `path`.
///
/// Each node averages, over its incidences (both directions, with
/// multiplicity), the neighbour message plus the interval term
/// `W_t ln(1 + (t_e - max(last[u], last[v])))`.
pub fn message_pass(
    tape: &mut Tape<'_>,
    path: &PathWeights,
    events: &[Event],
    last: &[f64],
) -> Result<(Vec<usize>, Var), ModelError> {
    let count = last.len();
    let mut local = vec![usize::MAX; count];
    let mut nodes = Vec::new();
    let mut slot = |n: usize, nodes: &mut Vec<usize>| -> Result<usize, ModelError> {
        if n >= count {
            return Err(ModelError::UnknownNode { node: n, count });
        }
        if local[n] == usize::MAX {
            local[n] = nodes.len();
            nodes.push(n);
        }
        Ok(local[n])
    };
    // (receiver, sender, interval feature)
    let mut incidences = Vec::with_capacity(events.len() * 2);
    for e in events {
        let a = slot(e.u, &mut nodes)?;
        let b = slot(e.v, &mut nodes)?;
        let gap = (e.t - last[e.u].max(last[e.v])).max(0.0);
        let feature = gap.ln_1p();
        incidences.push((a, b, feature));
        incidences.push((b, a, feature));
    }
    let k = nodes.len();
    let mut degree = vec![0usize; k];
    for &(r, _, _) in &incidences {
        degree[r] += 1;
    }
    let combine: Vec<(usize, usize, f64)> = incidences
        .iter()
        .map(|&(r, s, _)| (r, s, 1.0 / degree[r] as f64))
        .collect();
    let mut mean_feature = vec![0.0; k];
    for &(r, _, f) in &incidences {
        mean_feature[r] += f / degree[r] as f64;
    }
    let time_col = tape.constant(&Tensor::new(vec![k, 1], mean_feature).expect("column shape"));

    let statics = tape.param(path.static_emb);
    let mut x = tape.gather_rows(statics, &nodes)?;
    for layer in &path.layers {
        let ws = tape.param(layer.self_w);
        let wn = tape.param(layer.neigh_w);
        let own = tape.matmul(x, ws)?;
        let msg = tape.matmul(x, wn)?;
        let msg = tape.row_combine(msg, &combine, k)?;
        let mut next = tape.add(own, msg)?;
        if let Some(wt) = layer.time_w {
            let wt = tape.param(wt);
            let term = tape.matmul(time_col, wt)?;
            next = tape.add(next, term)?;
        }
        x = next;
    }
    Ok((nodes, x))
}

/// GRU update of the listed nodes' rows in `refs`; returns the new `[k, d]` block.
pub fn evolve(
    tape: &mut Tape<'_>,
    gru: &GruCell,
    refs: &mut [RowRef],
    nodes: &[usize],
    x: Var,
) -> Result<Var, ModelError> {
    let d = gru.hidden_dim;
    let prev: Vec<RowRef> = nodes.iter().map(|&n| refs[n]).collect();
    let h = tape.stack_rows(&prev, d)?;
    let h_new = gru.forward(tape, x, h)?;
    for (j, &n) in nodes.iter().enumerate() {
        refs[n] = (h_new, j);
    }
    Ok(h_new)
}

/// Validate that every generated time lies strictly inside `(t_bar, t)`.
pub fn check_missing_window(events: &[Event], t_bar: f64, t: f64) -> Result<(), ModelError> {
    match events.iter().find(|e| !(e.t > t_bar && e.t < t)) {
        Some(e) => Err(ModelError::OutsideWindow {
            t_prime: e.t,
            t_bar,
            t,
        }),
        None => Ok(()),
    }
}

/// CSV rows `node_id,dim0,...` of `g_u` for every node.
pub fn write_embeddings_csv<W: Write>(
    mut w: W,
    params: &ParamStore,
    obs: &PathWeights,
    miss: &PathWeights,
    states: &NodeStates,
) -> Result<(), ModelError> {
    let d = states.dim;
    let mut header = String::from("node_id");
    for i in 0..4 * d {
        header.push_str(&format!(",dim{i}"));
    }
    writeln!(w, "{header}")?;
    let so = params.value(obs.static_emb).data();
    let sm = params.value(miss.static_emb).data();
    for u in 0..states.node_count() {
        let row = so[u * d..(u + 1) * d]
            .iter()
            .chain(states.evolved_o(u))
            .chain(&sm[u * d..(u + 1) * d])
            .chain(states.evolved_m(u));
        let mut line = u.to_string();
        for x in row {
            line.push_str(&format!(",{x}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
