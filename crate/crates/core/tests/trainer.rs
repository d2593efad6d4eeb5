use std::time::Instant;

use mtgn::autodiff::{grad_check_params, Tape};
use mtgn::config::TrainConfig;
use mtgn::evaluator::evaluate;
use mtgn::missing::{Draw, DrawSource};
use mtgn::model::{Model, ModelError};
use mtgn::stream::{batch_by_timestep, generate_synthetic, split_train_test, Event, EventStream, Regime, SyntheticConfig, TimeStep};
use mtgn::trainer::{
    checkpoint, fit, replay_loss, restore, select_lr, step, step_options, step_seed, History, HISTORY_HEADER,
};

fn toy() -> EventStream {
    let e = |u, v, t| Event::observed(u, v, t);
    EventStream::new(
        vec![e(0, 1, 0.0), e(2, 3, 0.0), e(1, 4, 2.0), e(0, 2, 2.0), e(3, 4, 2.0), e(1, 0, 5.0), e(4, 2, 5.0)],
        5,
        "1",
    )
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        embed_dim: 3,
        gnn_layers: 2,
        mixture_components: 2,
        max_epochs: 3,
        mc_samples: 4,
        lr: 1e-2,
        seed: 11,
        ..TrainConfig::default()
    }
}

/// Forward every step once with live draws, returning per-step losses and draws.
fn live_pass(model: &Model, steps: &[TimeStep], cfg: &TrainConfig) -> (Vec<mtgn::trainer::StepLoss>, Vec<Vec<Draw>>) {
    let mut tape = Tape::new(&model.params);
    let mut states = model.initial_states(steps[0].t);
    let mut vars = states.attach(&mut tape);
    let mut losses = Vec::new();
    let mut draws = Vec::new();
    for (i, s) in steps.iter().enumerate() {
        let opts = step_options(cfg, DrawSource::Live { seed: step_seed(cfg.seed, 0, i) }).unwrap();
        let (_, loss, d) = step(model, &mut tape, &mut states, &mut vars, s, &opts).unwrap();
        losses.push(loss);
        draws.push(d);
    }
    (losses, draws)
}

#[test]
fn loss_decomposition_holds_every_step() {
    let cfg = small_cfg();
    let model = Model::new(&cfg, 5).unwrap();
    let (losses, draws) = live_pass(&model, &batch_by_timestep(&toy()), &cfg);
    assert_eq!(losses.len(), 3);
    for l in &losses {
        let want = -(l.l_obs_structure + l.l_obs_time) + l.l_missing_kl;
        assert!((l.total - want).abs() < 1e-9 * want.abs().max(1.0));
        assert!(l.l_obs_structure < 0.0);
    }
    assert!(draws.iter().any(|d| !d.is_empty()));
}

#[test]
fn without_missing_events_kl_is_zero() {
    let cfg = TrainConfig { wo_m: true, ..small_cfg() };
    let model = Model::new(&cfg, 5).unwrap();
    let (losses, draws) = live_pass(&model, &batch_by_timestep(&toy()), &cfg);
    assert!(losses.iter().all(|l| l.l_missing_kl == 0.0));
    assert!(draws.iter().all(Vec::is_empty));
    let mut m = Model::new(&cfg, 5).unwrap();
    let h = fit(&mut m, &toy(), &cfg).unwrap();
    assert!(h.epochs.iter().all(|r| r.loss.l_missing_kl == 0.0));
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let started = Instant::now();
    let cfg = TrainConfig {
        embed_dim: 2,
        gnn_layers: 1,
        mixture_components: 2,
        mc_samples: 3,
        ..small_cfg()
    };
    let model = Model::new(&cfg, 5).unwrap();
    let steps = batch_by_timestep(&toy());
    let (_, draws) = live_pass(&model, &steps, &cfg);
    assert!(draws.iter().all(|d| !d.is_empty()), "every step should carry missing draws");
    let err = grad_check_params::<ModelError>(&model.params, |tape| replay_loss(&model, tape, &steps, &draws, &cfg)).unwrap();
    assert!(err < 1e-3, "max relative error {err}");
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn one_window_means_one_optimizer_call_per_epoch() {
    let cfg = TrainConfig { bptt_steps: 3, ..small_cfg() };
    let mut m = Model::new(&cfg, 5).unwrap();
    let h = fit(&mut m, &toy(), &cfg).unwrap();
    assert_eq!(h.optimizer_steps, cfg.max_epochs);
    let cfg = TrainConfig { bptt_steps: 1, ..small_cfg() };
    let mut m = Model::new(&cfg, 5).unwrap();
    assert_eq!(fit(&mut m, &toy(), &cfg).unwrap().optimizer_steps, 3 * cfg.max_epochs);
}

fn param_bits(m: &Model) -> Vec<u64> {
    m.params.iter().flat_map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = small_cfg();
    let mut a = Model::new(&cfg, 5).unwrap();
    let mut b = Model::new(&cfg, 5).unwrap();
    let ha = fit(&mut a, &toy(), &cfg).unwrap();
    let hb = fit(&mut b, &toy(), &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(param_bits(&a), param_bits(&b));
    let other = TrainConfig { seed: 12, ..cfg };
    let mut c = Model::new(&other, 5).unwrap();
    fit(&mut c, &toy(), &other).unwrap();
    assert_ne!(param_bits(&a), param_bits(&c));
}

#[test]
fn zero_ratio_is_bit_identical_to_the_ablation() {
    let full = TrainConfig { missing_ratio: 0.0, ..small_cfg() };
    let ablated = TrainConfig { wo_m: true, ..small_cfg() };
    let mut a = Model::new(&full, 5).unwrap();
    let mut b = Model::new(&ablated, 5).unwrap();
    let ha = fit(&mut a, &toy(), &full).unwrap();
    let hb = fit(&mut b, &toy(), &ablated).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(param_bits(&a), param_bits(&b));
}

fn periodic(nodes: usize, events: usize) -> EventStream {
    generate_synthetic(&SyntheticConfig::new(nodes, events, Regime::PeriodicCommunities, 3)).unwrap().0
}

#[test]
fn epoch_loss_decreases_on_the_periodic_regime() {
    let cfg = TrainConfig {
        max_epochs: 10,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let train = periodic(60, 1500);
    let mut m = Model::new(&cfg, train.node_count).unwrap();
    let losses = fit(&mut m, &train, &cfg).unwrap().losses();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn ablated_epoch_loss_decreases_on_the_periodic_regime() {
    let cfg = TrainConfig {
        max_epochs: 10,
        lr: 1e-3,
        wo_m: true,
        ..TrainConfig::default()
    };
    let train = periodic(60, 1500);
    let mut m = Model::new(&cfg, train.node_count).unwrap();
    let losses = fit(&mut m, &train, &cfg).unwrap().losses();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn nan_parameters_abort_with_the_step_index() {
    let cfg = small_cfg();
    let mut m = Model::new(&cfg, 5).unwrap();
    m.params.map_values(|name, t| {
        if name == "obs.static" {
            t.data_mut()[0] = f64::NAN;
        }
    });
    match fit(&mut m, &toy(), &cfg) {
        Err(ModelError::NonFiniteLoss { epoch, step }) => assert_eq!((epoch, step), (0, 0)),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let stream = periodic(12, 200);
    let split = split_train_test(&stream, 0.2, true).unwrap();
    let mut m = Model::new(&cfg, stream.node_count).unwrap();
    fit(&mut m, &split.train, &cfg).unwrap();
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    checkpoint(&m, &cfg, &first).unwrap();
    let back = restore(&first, &cfg, stream.node_count).unwrap();
    checkpoint(&back, &cfg, &second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(param_bits(&m), param_bits(&back));

    let before = evaluate(&m, &split.train, &split.test_full, &cfg).unwrap();
    let after = evaluate(&back, &split.train, &split.test_full, &cfg).unwrap();
    assert_eq!(before, after);

    let wrong = TrainConfig { embed_dim: 4, ..cfg.clone() };
    match restore(&first, &wrong, stream.node_count) {
        Err(ModelError::FingerprintMismatch { field, .. }) => assert_eq!(field, "embed_dim"),
        other => panic!("expected a fingerprint mismatch, got {:?}", other.map(|_| ())),
    }
    assert!(matches!(
        restore(&first, &cfg, stream.node_count + 1),
        Err(ModelError::FingerprintMismatch { field: "node_count", .. })
    ));
}

#[test]
fn learning_rate_comes_from_the_grid() {
    let cfg = TrainConfig {
        lr_grid: vec![1e-2, 1e-4],
        max_epochs: 2,
        ..small_cfg()
    };
    let train = periodic(10, 120);
    let (best, scores) = select_lr(&train, &cfg).unwrap();
    assert_eq!(scores.len(), 2);
    assert!(cfg.lr_grid.contains(&best));
    let min = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    assert_eq!(scores.iter().find(|s| s.0 == best).unwrap().1, min);
}

#[test]
fn history_csv_layout() {
    let cfg = small_cfg();
    let mut m = Model::new(&cfg, 5).unwrap();
    let h: History = fit(&mut m, &toy(), &cfg).unwrap();
    let mut buf = Vec::new();
    h.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], HISTORY_HEADER);
    assert_eq!(lines.len(), 1 + cfg.max_epochs);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
}
