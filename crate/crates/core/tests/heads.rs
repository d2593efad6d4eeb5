use mtgn::autodiff::{Tape, Tensor};
use mtgn::config::{TieRule, TrainConfig};
use mtgn::embeddings::{evolve, message_pass, NodeStates, Readout, StateVars};
use mtgn::evaluator::rank_of;
use mtgn::heads::Process;
use mtgn::model::Model;
use mtgn::stream::Event;
use proptest::prelude::*;

fn model(n: usize, seed: u64) -> Model {
    let cfg = TrainConfig {
        embed_dim: 3,
        gnn_layers: 1,
        mixture_components: 2,
        seed,
        ..TrainConfig::default()
    };
    Model::new(&cfg, n).unwrap()
}

/// Run observed events through the observed path and return the readouts
/// before and after them.
fn readouts<'p>(m: &'p Model, tape: &mut Tape<'p>, events: &[Event]) -> (Readout, Readout, NodeStates, StateVars) {
    let mut states = m.initial_states(0.0);
    let mut vars = states.attach(tape);
    let before = m.readout(tape, &states, &vars).unwrap();
    if !events.is_empty() {
        let (nodes, x) = message_pass(tape, &m.layout.obs, events, states.last_obs()).unwrap();
        evolve(tape, &m.layout.obs.gru, &mut vars.o, &nodes, x).unwrap();
        states.record_observed(events);
    }
    let after = m.readout(tape, &states, &vars).unwrap();
    (before, after, states, vars)
}

fn probs(tape: &Tape<'_>, v: mtgn::autodiff::Var, row: usize) -> Vec<f64> {
    tape.row(v, row).iter().map(|x| x.exp()).collect()
}

fn zero_heads(m: &mut Model) {
    m.params.map_values(|name, t| {
        if name.starts_with("head.") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    });
}

#[test]
fn zero_heads_are_uniform() {
    let mut m = model(10, 1);
    zero_heads(&mut m);
    let mut tape = Tape::new(&m.params);
    let events = [Event::observed(2, 7, 1.0)];
    let (before, after, _, _) = readouts(&m, &mut tape, &events);
    let h = &m.layout.heads;
    for p in [Process::Observed, Process::Prior, Process::Posterior] {
        let s = h.subject_logprobs(&mut tape, p, &before, Some(&after)).unwrap();
        let o = h.object_logprobs(&mut tape, p, &[2, 5], &before, Some(&after)).unwrap();
        for v in tape.value(s).iter().chain(tape.value(o)) {
            assert!((v - (0.1f64).ln()).abs() < 1e-12);
        }
    }
    let ll = h.observed_structure_loglik(&mut tape, &[(2, 7)], &after).unwrap();
    assert!((tape.scalar(ll) - (-4.60517)).abs() < 1e-5);
    assert!((tape.scalar(ll) - 2.0 * (0.1f64).ln()).abs() < 1e-12);
}

#[test]
fn joint_table_sums_to_one_and_matches_loglik() {
    let m = model(5, 2);
    let mut tape = Tape::new(&m.params);
    let (_, after, _, _) = readouts(&m, &mut tape, &[Event::observed(0, 3, 1.0), Event::observed(1, 3, 1.0)]);
    let h = &m.layout.heads;
    let s = h.subject_logprobs(&mut tape, Process::Observed, &after, None).unwrap();
    let all: Vec<usize> = (0..5).collect();
    let o = h.object_logprobs(&mut tape, Process::Observed, &all, &after, None).unwrap();
    let ps = probs(&tape, s, 0);
    let mut table = [[0.0; 5]; 5];
    let mut total = 0.0;
    for u in 0..5 {
        let po = probs(&tape, o, u);
        for v in 0..5 {
            table[u][v] = ps[u] * po[v];
            total += table[u][v];
        }
    }
    assert!((total - 1.0).abs() < 1e-12);
    let events = [(4, 1), (0, 0), (2, 3)];
    let ll = h.observed_structure_loglik(&mut tape, &events, &after).unwrap();
    let want: f64 = events.iter().map(|&(u, v)| table[u][v].ln()).sum();
    assert!((tape.scalar(ll) - want).abs() < 1e-12);
    let single: f64 = events
        .iter()
        .map(|&p| {
            let v = h.observed_structure_loglik(&mut tape, &[p], &after).unwrap();
            tape.scalar(v)
        })
        .sum();
    assert!((tape.scalar(ll) - single).abs() < 1e-12);
}

#[test]
fn posterior_differs_from_prior_once_observations_arrive() {
    let m = model(8, 3);
    let mut tape = Tape::new(&m.params);
    let (before, after, _, _) = readouts(&m, &mut tape, &[Event::observed(1, 6, 1.0)]);
    assert!(tape.value(after.obs_pool).iter().any(|&x| x != 0.0));
    let h = &m.layout.heads;
    let p = h.subject_logprobs(&mut tape, Process::Prior, &before, None).unwrap();
    let q = h.subject_logprobs(&mut tape, Process::Posterior, &before, Some(&after)).unwrap();
    assert!(tape.value(p).iter().zip(tape.value(q)).any(|(a, b)| (a - b).abs() > 1e-6));
    let p = h.object_logprobs(&mut tape, Process::Prior, &[1], &before, None).unwrap();
    let q = h.object_logprobs(&mut tape, Process::Posterior, &[1], &before, Some(&after)).unwrap();
    assert!(tape.value(p).iter().zip(tape.value(q)).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn posterior_requires_the_current_readout() {
    let m = model(4, 4);
    let mut tape = Tape::new(&m.params);
    let (before, _, _, _) = readouts(&m, &mut tape, &[]);
    let h = &m.layout.heads;
    assert!(h.subject_logprobs(&mut tape, Process::Posterior, &before, None).is_err());
    assert!(h.object_logprobs(&mut tape, Process::Observed, &[4], &before, None).is_err());
}

#[test]
fn relabeling_nodes_permutes_probabilities() {
    let n = 6;
    let perm = [3, 0, 5, 1, 4, 2];
    let base = model(n, 5);
    let mut relabeled = base.clone();
    let source = base.params.clone();
    relabeled.params.map_values(|name, t| {
        let old = source.value(source.id(name).unwrap()).data();
        let (rows, cols) = t.dims2();
        let data = t.data_mut();
        if name.ends_with(".static") {
            for i in 0..rows {
                data[perm[i] * cols..(perm[i] + 1) * cols].copy_from_slice(&old[i * cols..(i + 1) * cols]);
            }
        } else if name.starts_with("head.") && name.contains(".output.") {
            for r in 0..rows {
                for j in 0..cols {
                    data[r * cols + perm[j]] = old[r * cols + j];
                }
            }
        }
    });
    let events = [Event::observed(0, 2, 1.0), Event::observed(4, 2, 1.0)];
    let moved: Vec<Event> = events.iter().map(|e| Event::observed(perm[e.u], perm[e.v], e.t)).collect();

    let mut ta = Tape::new(&base.params);
    let (ba, aa, _, _) = readouts(&base, &mut ta, &events);
    let mut tb = Tape::new(&relabeled.params);
    let (bb, ab, _, _) = readouts(&relabeled, &mut tb, &moved);
    for p in [Process::Observed, Process::Prior, Process::Posterior] {
        let sa = base.layout.heads.subject_logprobs(&mut ta, p, &ba, Some(&aa)).unwrap();
        let sb = relabeled.layout.heads.subject_logprobs(&mut tb, p, &bb, Some(&ab)).unwrap();
        for (u, &pu) in perm.iter().enumerate() {
            assert!((ta.row(sa, 0)[u] - tb.row(sb, 0)[pu]).abs() < 1e-12);
        }
        for (u, &pu) in perm.iter().enumerate() {
            let oa = base.layout.heads.object_logprobs(&mut ta, p, &[u], &ba, Some(&aa)).unwrap();
            let ob = relabeled.layout.heads.object_logprobs(&mut tb, p, &[pu], &bb, Some(&ab)).unwrap();
            for (v, &pv) in perm.iter().enumerate() {
                assert!((ta.row(oa, 0)[v] - tb.row(ob, 0)[pv]).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_process_yields_a_simplex(seed in 0u64..10_000, u in 0usize..7, v in 0usize..7) {
        let m = model(7, seed);
        let mut tape = Tape::new(&m.params);
        let (before, after, _, _) = readouts(&m, &mut tape, &[Event::observed(u, v, 1.0)]);
        let all: Vec<usize> = (0..7).collect();
        for p in [Process::Observed, Process::Prior, Process::Posterior] {
            let s = m.layout.heads.subject_logprobs(&mut tape, p, &before, Some(&after)).unwrap();
            prop_assert!((probs(&tape, s, 0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let o = m.layout.heads.object_logprobs(&mut tape, p, &all, &before, Some(&after)).unwrap();
            for r in 0..7 {
                prop_assert!((probs(&tape, o, r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_logit_shift_keeps_ranks(seed in 0u64..10_000, shift in -1e3..1e3f64, target in 0usize..7) {
        let m = model(7, seed);
        let mut tape = Tape::new(&m.params);
        let (_, after, _, _) = readouts(&m, &mut tape, &[]);
        let o = m.layout.heads.object_logprobs(&mut tape, Process::Observed, &[target], &after, None).unwrap();
        let scores = tape.row(o, 0).to_vec();
        let shifted = tape.constant(&Tensor::row(scores.iter().map(|x| x + shift).collect()));
        for rule in [TieRule::Optimistic, TieRule::Pessimistic] {
            for c in 0..7 {
                prop_assert_eq!(rank_of(&scores, c, rule), rank_of(tape.row(shifted, 0), c, rule));
            }
        }
    }
}
