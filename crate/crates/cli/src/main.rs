mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtgn::config::QStrategy;
use mtgn::stream::Regime;

use commands::SweepParam;

#[derive(Parser, Debug)]
#[command(name = "mtgn", version, about = "Train and evaluate missing-event-aware temporal graph models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// No missing-event processes.
    WoM,
    /// No interval terms in message passing.
    WT,
}

/// Options that adjust the training configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    #[arg(long, value_parser = parse_q_strategy)]
    pub q_strategy: Option<QStrategy>,
    #[arg(long)]
    pub mask_z: Option<f64>,
    /// Override `max_epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn parse_q_strategy(s: &str) -> Result<QStrategy, String> {
    s.parse().map_err(|e: mtgn::config::ConfigError| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalise a raw `src dst timestamp` file and write its chronological split.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Raw timestamp ticks per time unit.
        #[arg(long, default_value_t = 1.0)]
        ticks_per_unit: f64,
        #[arg(long, default_value = "1")]
        time_unit: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic event stream.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        nodes: usize,
        #[arg(long, default_value_t = 4000)]
        events: usize,
        #[arg(long, default_value = "periodic-communities")]
        regime: Regime,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the training part of an event stream.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pick the learning rate from the config's `lr_grid` first.
        #[arg(long)]
        select_lr: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on the test part of an event stream.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate under this config instead of the checkpoint's own.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of one hyperparameter.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required_unless_present = "paper_grid")]
        values: Vec<f64>,
        /// Use the published sensitivity grid for the parameter.
        #[arg(long)]
        paper_grid: bool,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time training epochs on synthetic streams of growing size.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = mtgn::pipeline::BENCH_SIZES)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        nodes: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write per-node readout vectors after consuming a stream.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare {
            data,
            out,
            ticks_per_unit,
            time_unit,
            cfg,
        } => commands::prepare(&data, &out, ticks_per_unit, time_unit, &cfg),
        Command::Synth {
            out,
            nodes,
            events,
            regime,
            seed,
        } => commands::synth(&out, nodes, events, regime, seed),
        Command::Train {
            data,
            out,
            select_lr,
            cfg,
        } => commands::train(&data, &out, select_lr, &cfg),
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
        } => commands::eval(&checkpoint, &data, &out, config.as_deref()),
        Command::Sweep {
            data,
            out,
            param,
            values,
            paper_grid,
            seeds,
            cfg,
        } => {
            let values = if paper_grid { param.paper_grid() } else { values };
            commands::sweep(&data, &out, param, &values, seeds, &cfg)
        }
        Command::Bench { out, sizes, nodes, cfg } => commands::bench(&out, &sizes, nodes, &cfg),
        Command::ExportEmbeddings { checkpoint, data, out } => commands::export_embeddings(&checkpoint, &data, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
