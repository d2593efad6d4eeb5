use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use log::info;
use mtgn::config::TrainConfig;
use mtgn::embeddings::write_embeddings_csv;
use mtgn::evaluator::{evaluate, rollout};
use mtgn::model::Model;
use mtgn::parallel::{map_ordered, thread_count};
use mtgn::pipeline::{bench_scaling, log_log_slope, prepare as split_and_mask, train_and_evaluate, BENCH_HEADER};
use mtgn::stream::{generate_synthetic, parse_events, write_events, EventStream, ParseOptions, Regime, SyntheticConfig};
use mtgn::trainer::{checkpoint, fit, restore, select_lr};
use serde_json::json;

use crate::manifest::Recorder;
use crate::{Ablation, ConfigArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_HEADER: &str = "param,value,seed,metric,score";
const BENCH_EPOCHS: usize = 2;

pub fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    for a in &args.ablate {
        match a {
            Ablation::WoM => cfg.wo_m = true,
            Ablation::WT => cfg.w_t = true,
        }
    }
    if let Some(q) = args.q_strategy {
        cfg.q_strategy = q;
    }
    if let Some(z) = args.mask_z {
        cfg.mask_z = z;
    }
    if let Some(e) = args.epochs {
        cfg.max_epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_stream(path: &Path, rec: &mut Recorder) -> Result<EventStream> {
    rec.input(path)?;
    let (stream, _) = parse_events(path, &ParseOptions::default()).with_context(|| format!("loading {}", path.display()))?;
    Ok(stream)
}

fn out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_file(path: &Path, rec: &mut Recorder, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    body(&mut w)?;
    w.flush()?;
    rec.output(path);
    Ok(())
}

pub fn prepare(data: &Path, out: &Path, ticks_per_unit: f64, time_unit: String, args: &ConfigArgs) -> Result<()> {
    let mut rec = Recorder::start("prepare");
    let cfg = resolve_config(args)?;
    rec.config(&cfg);
    out_dir(out)?;
    rec.input(data)?;
    let opts = ParseOptions { ticks_per_unit, time_unit };
    let (stream, ids) = parse_events(data, &opts).with_context(|| format!("loading {}", data.display()))?;
    let prepared = split_and_mask(&stream, &cfg)?;
    write_file(&out.join("events.txt"), &mut rec, |w| Ok(write_events(&stream, w)?))?;
    write_file(&out.join("ids.txt"), &mut rec, |w| Ok(ids.write(w)?))?;
    write_file(&out.join("train.txt"), &mut rec, |w| Ok(write_events(&prepared.train, w)?))?;
    write_file(&out.join("test.txt"), &mut rec, |w| Ok(write_events(&prepared.split.test_full, w)?))?;
    let summary = json!({
        "node_count": stream.node_count,
        "n_events": stream.len(),
        "n_train": prepared.train.len(),
        "n_masked": prepared.masked.len(),
        "n_test": prepared.split.test_raw_len,
        "n_test_scored": prepared.split.test.len(),
        "inductive_pct": prepared.split.inductive_pct,
    });
    write_file(&out.join("split.json"), &mut rec, |w| Ok(serde_json::to_writer_pretty(w, &summary)?))?;
    println!("{summary}");
    rec.finish(out)?;
    Ok(())
}

pub fn synth(out: &Path, nodes: usize, events: usize, regime: Regime, seed: u64) -> Result<()> {
    let mut rec = Recorder::start("synth");
    rec.seed(seed);
    out_dir(out)?;
    let (stream, meta) = generate_synthetic(&SyntheticConfig::new(nodes, events, regime, seed))?;
    write_file(&out.join("events.txt"), &mut rec, |w| Ok(write_events(&stream, w)?))?;
    write_file(&out.join("synthetic.json"), &mut rec, |w| Ok(w.write_all(meta.to_json()?.as_bytes())?))?;
    rec.finish(out)?;
    Ok(())
}

pub fn train(data: &Path, out: &Path, choose_lr: bool, args: &ConfigArgs) -> Result<()> {
    let mut rec = Recorder::start("train");
    let mut cfg = resolve_config(args)?;
    out_dir(out)?;
    let stream = load_stream(data, &mut rec)?;
    let prepared = split_and_mask(&stream, &cfg)?;
    if choose_lr {
        let (lr, scores) = select_lr(&prepared.train, &cfg)?;
        info!("learning rate {lr} from {scores:?}");
        cfg.lr = lr;
    }
    rec.config(&cfg);
    info!(
        "{} nodes, {} training events ({} masked), {} epochs",
        stream.node_count,
        prepared.train.len(),
        prepared.masked.len(),
        cfg.max_epochs
    );
    let mut model = Model::new(&cfg, stream.node_count)?;
    let history = fit(&mut model, &prepared.train, &cfg)?;
    if let Some(last) = history.epochs.last() {
        info!("final epoch loss {:.4}", last.loss.total);
    }
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint(&model, &cfg, &ckpt)?;
    rec.output(&ckpt);
    write_file(&out.join(HISTORY_FILE), &mut rec, |w| Ok(history.write_csv(w)?))?;
    rec.finish(out)?;
    Ok(())
}

/// The checkpoint's own config, unless `config` overrides it.
fn load_model(ckpt: &Path, config: Option<&Path>, node_count: usize, rec: &mut Recorder) -> Result<(Model, TrainConfig)> {
    rec.input(ckpt)?;
    let cfg = match config {
        Some(path) => {
            rec.input(path)?;
            resolve_config(&ConfigArgs {
                config: Some(path.to_path_buf()),
                ..ConfigArgs::default()
            })?
        }
        None => {
            let file = File::open(ckpt).with_context(|| format!("opening {}", ckpt.display()))?;
            Model::load(std::io::BufReader::new(file))?.1.config
        }
    };
    let model = restore(ckpt, &cfg, node_count).with_context(|| format!("restoring {}", ckpt.display()))?;
    rec.config(&cfg);
    Ok((model, cfg))
}

pub fn eval(ckpt: &Path, data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut rec = Recorder::start("eval");
    let stream = load_stream(data, &mut rec)?;
    let (model, cfg) = load_model(ckpt, config, stream.node_count, &mut rec)?;
    out_dir(out)?;
    let prepared = split_and_mask(&stream, &cfg)?;
    let report = evaluate(&model, &prepared.train, &prepared.split.test_full, &cfg)?;
    write_file(&out.join(REPORT_FILE), &mut rec, |w| Ok(w.write_all(report.to_json().as_bytes())?))?;
    println!("{}", report.to_json());
    rec.finish(out)?;
    Ok(())
}

pub fn export_embeddings(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let mut rec = Recorder::start("export-embeddings");
    let stream = load_stream(data, &mut rec)?;
    let (model, cfg) = load_model(ckpt, None, stream.node_count, &mut rec)?;
    out_dir(out)?;
    let states = rollout(&model, &stream, &cfg)?;
    write_file(&out.join("embeddings.csv"), &mut rec, |w| {
        Ok(write_embeddings_csv(w, &model.params, &model.layout.obs, &model.layout.miss, &states)?)
    })?;
    rec.finish(out)?;
    Ok(())
}

/// Hyperparameters `sweep` can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Q,
    K,
    L,
    Dim,
    MaskZ,
}

pub const SWEEP_PARAMS: [&str; 5] = ["Q", "K", "L", "dim", "mask_z"];

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Q" => Ok(SweepParam::Q),
            "K" => Ok(SweepParam::K),
            "L" => Ok(SweepParam::L),
            "dim" => Ok(SweepParam::Dim),
            "mask_z" => Ok(SweepParam::MaskZ),
            other => Err(format!("unknown sweep parameter {other:?}; valid names: {}", SWEEP_PARAMS.join(", "))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Q => "Q",
            SweepParam::K => "K",
            SweepParam::L => "L",
            SweepParam::Dim => "dim",
            SweepParam::MaskZ => "mask_z",
        }
    }

    pub fn paper_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Q => vec![0.2, 0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            SweepParam::K => vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            SweepParam::L => vec![1.0, 2.0, 3.0, 4.0],
            SweepParam::Dim => vec![8.0, 16.0, 32.0, 64.0, 128.0, 256.0],
            SweepParam::MaskZ => (1..=8).map(|i| i as f64 / 10.0).collect(),
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig, value: f64) -> Result<()> {
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                bail!("{} takes positive integers, got {value}", self.name())
            }
        };
        match self {
            SweepParam::Q => cfg.missing_ratio = value,
            SweepParam::K => cfg.mixture_components = count()?,
            SweepParam::L => cfg.gnn_layers = count()?,
            SweepParam::Dim => cfg.embed_dim = count()?,
            SweepParam::MaskZ => cfg.mask_z = value,
        }
        cfg.validate()?;
        Ok(())
    }
}

pub fn sweep(data: &Path, out: &Path, param: SweepParam, values: &[f64], seeds: u64, args: &ConfigArgs) -> Result<()> {
    let mut rec = Recorder::start("sweep");
    let base = resolve_config(args)?;
    rec.config(&base);
    out_dir(out)?;
    let stream = load_stream(data, &mut rec)?;
    let mut points = Vec::new();
    for &value in values {
        for i in 0..seeds {
            let mut cfg = base.clone();
            param.apply(&mut cfg, value)?;
            cfg.seed = base.seed + i;
            points.push((value, cfg));
        }
    }
    info!("{} points for {} on {} threads", points.len(), param.name(), thread_count());
    let results = map_ordered(points, thread_count(), |(value, cfg)| {
        train_and_evaluate(&stream, &cfg).map(|o| (value, cfg.seed, o.report))
    });
    write_file(&out.join("sweep.csv"), &mut rec, |w| {
        writeln!(w, "{SWEEP_HEADER}")?;
        for r in results {
            let (value, seed, report) = r?;
            for (k, h) in &report.hits_at {
                writeln!(w, "{},{value},{seed},hits_at_{k},{h}", param.name())?;
            }
            writeln!(w, "{},{value},{seed},mae,{}", param.name(), report.mae)?;
        }
        Ok(())
    })?;
    rec.finish(out)?;
    Ok(())
}

pub fn bench(out: &Path, sizes: &[usize], nodes: usize, args: &ConfigArgs) -> Result<()> {
    let mut rec = Recorder::start("bench");
    let mut cfg = resolve_config(args)?;
    if args.epochs.is_none() {
        cfg.max_epochs = BENCH_EPOCHS;
    }
    rec.config(&cfg);
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        bail!("sizes must be strictly ascending");
    }
    out_dir(out)?;
    let points = bench_scaling(sizes, nodes, &cfg)?;
    let slope = log_log_slope(&points);
    write_file(&out.join("bench.csv"), &mut rec, |w| {
        writeln!(w, "{BENCH_HEADER}")?;
        for (n, s) in &points {
            writeln!(w, "{n},{s}")?;
        }
        Ok(())
    })?;
    let summary = json!({ "nodes": nodes, "epochs": cfg.max_epochs, "points": points, "slope": slope });
    write_file(&out.join("bench.json"), &mut rec, |w| Ok(serde_json::to_writer_pretty(w, &summary)?))?;
    println!("slope {slope}");
    rec.finish(out)?;
    Ok(())
}
