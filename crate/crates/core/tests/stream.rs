use std::collections::HashMap;

use mtgn::stream::{
    batch_by_timestep, flatten, generate_synthetic, parse_events, parse_events_str, split_train_test,
    write_events, write_events_string, Event, EventStream, ParseOptions, Regime, SyntheticConfig,
};
use proptest::prelude::*;

fn opts() -> ParseOptions {
    ParseOptions::default()
}

#[test]
fn fixture_with_113_nodes() {
    // star-plus-ring layout over 113 raw string ids, shuffled timestamps
    let mut text = String::new();
    for i in 0..113u64 {
        let j = (i + 1) % 113;
        let t = 1_000_000 + (i * 7919) % 500 * 20;
        text.push_str(&format!("p{i} p{j} {t}\n"));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("edges.txt");
    std::fs::write(&path, &text).unwrap();
    let (s, ids) = parse_events(&path, &opts()).unwrap();
    assert_eq!(s.node_count, 113);
    assert_eq!(ids.len(), 113);
    assert!(s.is_sorted());
    assert_eq!(s.start_time(), Some(0.0));
}

#[test]
fn stable_sort_within_equal_timestamps() {
    let (s, ids) = parse_events_str("c d 2\na b 1\ne f 1\ng h 1\n", &opts()).unwrap();
    let firsts: Vec<_> = s.events.iter().map(|e| ids.raw(e.u).unwrap()).collect();
    assert_eq!(firsts, vec!["a", "e", "g", "c"]);
}

#[test]
fn synthetic_is_seed_deterministic() {
    let cfg = SyntheticConfig::new(40, 2000, Regime::PeriodicCommunities, 11);
    let (a, ma) = generate_synthetic(&cfg).unwrap();
    let (b, mb) = generate_synthetic(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let other = SyntheticConfig { seed: 12, ..cfg };
    assert_ne!(generate_synthetic(&other).unwrap().0, a);
}

/// Sample mean of successive per-pair gaps, grouped by the pair's gap clock.
fn empirical_gaps(stream: &EventStream, pairs: &[(usize, usize, usize)], clocks: usize) -> Vec<(f64, usize)> {
    let clock_of: HashMap<(usize, usize), usize> = pairs.iter().map(|&(u, v, c)| ((u.min(v), u.max(v)), c)).collect();
    let mut last: HashMap<(usize, usize), f64> = HashMap::new();
    let mut sums = vec![(0.0, 0usize); clocks];
    for e in &stream.events {
        let key = (e.u.min(e.v), e.u.max(e.v));
        if let Some(prev) = last.insert(key, e.t) {
            let c = clock_of[&key];
            sums[c].0 += e.t - prev;
            sums[c].1 += 1;
        }
    }
    sums.into_iter().map(|(s, n)| (s / n as f64, n)).collect()
}

#[test]
fn mean_gap_matches_lognormal_mean() {
    const REL_TOL: f64 = 0.05;
    for regime in [Regime::PeriodicCommunities, Regime::PreferentialBursty] {
        let cfg = SyntheticConfig::new(60, 120_000, regime, 5);
        let (s, meta) = generate_synthetic(&cfg).unwrap();
        let means = empirical_gaps(&s, &meta.pairs, cfg.communities);
        for (c, (mean, count)) in means.iter().enumerate() {
            let target = (meta.log_means[c] + 0.5 * cfg.log_std * cfg.log_std).exp();
            assert!((target - meta.expected_mean_gaps[c]).abs() < 1e-12);
            let rel = (mean - target).abs() / target;
            assert!(rel < REL_TOL, "{regime} clock {c}: mean {mean} vs {target} over {count} gaps");
        }
    }
}

#[test]
fn community_regime_is_mostly_intra() {
    let cfg = SyntheticConfig::new(100, 5000, Regime::PeriodicCommunities, 2);
    assert_eq!(cfg.intra_bias, 0.9);
    let (s, meta) = generate_synthetic(&cfg).unwrap();
    let intra = s.events.iter().filter(|e| meta.community[e.u] == meta.community[e.v]).count();
    let frac = intra as f64 / s.len() as f64;
    assert!(frac >= 0.8, "intra fraction {frac}");
}

fn arb_stream() -> impl Strategy<Value = EventStream> {
    prop::collection::vec((0usize..12, 0usize..12, 0u32..4), 1..80).prop_map(|raw| {
        let mut t = 0.0;
        let events = raw
            .into_iter()
            .map(|(u, v, dt)| {
                t += dt as f64;
                Event::observed(u, v, t)
            })
            .collect();
        EventStream::new(events, 12, "1")
    })
}

proptest! {
    #[test]
    fn canonical_file_round_trips(raw in prop::collection::vec((0u8..20, 0u8..20, 0i64..1000), 1..60)) {
        let text: String = raw.iter().map(|(u, v, t)| format!("n{u} n{v} {}\n", t * 3 + 17)).collect();
        let (first, _) = parse_events_str(&text, &opts()).unwrap();
        let canonical = write_events_string(&first);
        let (second, _) = parse_events_str(&canonical, &opts()).unwrap();
        let mut bytes = Vec::new();
        write_events(&second, &mut bytes).unwrap();
        prop_assert_eq!(bytes, canonical.into_bytes());
    }

    #[test]
    fn batching_partitions_and_flattens(s in arb_stream()) {
        let steps = batch_by_timestep(&s);
        prop_assert_eq!(steps.iter().map(|st| st.observed.len()).sum::<usize>(), s.len());
        for w in steps.windows(2) {
            prop_assert!(w[0].t < w[1].t);
            prop_assert_eq!(w[1].t_bar, w[0].t);
        }
        for st in &steps {
            prop_assert!(st.observed.iter().all(|e| e.t == st.t));
        }
        prop_assert_eq!(flatten(&steps), s.events);
    }

    #[test]
    fn split_is_chronological_and_dedup_keeps_first(s in arb_stream(), frac in 0.05f64..0.95) {
        let (Ok(dedup), Ok(raw)) = (split_train_test(&s, frac, true), split_train_test(&s, frac, false)) else {
            return Ok(());
        };
        let max_train = dedup.train.events.iter().map(|e| e.t).fold(f64::MIN, f64::max);
        prop_assert!(dedup.test.events.iter().all(|e| e.t > max_train));
        prop_assert!(dedup.test.len() <= raw.test.len());
        prop_assert_eq!(raw.test.len(), dedup.test_raw_len);
        prop_assert_eq!(dedup.train.len() + raw.test.len(), s.len());
        for pair in raw.test.events.iter().map(Event::pair) {
            let first = raw.test.events.iter().find(|e| e.pair() == pair).unwrap();
            prop_assert!(dedup.test.events.contains(first));
        }
        prop_assert!((0.0..=100.0).contains(&dedup.inductive_pct));
    }
}
