use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stprompt::Error;

mod commands;
mod config;

/// Frozen-backbone forecasting with temporal prompt tuning.
#[derive(Parser, Debug)]
#[command(name = "stprompt", version)]
struct Cli {
    /// Run directory; relative paths resolve against $STPROMPT_RUN_ROOT when set.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// `key = value` file; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// sgd | momentum[:m] | adam
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TuneMode {
    Prompt,
    Finetune,
    Scratch,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Frozen,
    Prompt,
    Finetune,
    Scratch,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Pre,
    Tun,
    Val,
    Tst,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum InspectTarget {
    Backbone,
    Prompt,
    Finetune,
    Scratch,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load readings, impute gaps, optionally clean anomalies; writes series.csv and graph.csv.
    Ingest {
        #[arg(long)]
        readings: PathBuf,
        /// `src,dst,distance` rows keyed by sensor id.
        #[arg(long)]
        edges: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        sigma2: f64,
        /// Also replace z-score anomalies.
        #[arg(long)]
        anomalies: bool,
        #[arg(long, default_value_t = 5.0)]
        z_thresh: f64,
    },
    /// Synthetic sinusoid network plus a shifted copy; writes series.csv, shifted.csv, graph.csv.
    Shiftgen {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        /// lag:Δ | amp:α | mixed:Δ:α
        #[arg(long, default_value = "lag:2")]
        shift: String,
        #[arg(long, default_value_t = 24)]
        period: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0.3)]
        coupling: f64,
        /// ring | geometric:radius
        #[arg(long, default_value = "ring")]
        graph: String,
        /// First shifted step; the whole series when omitted.
        #[arg(long)]
        shift_from: Option<usize>,
    },
    /// Pretrain the backbone on series.csv, then freeze it.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Adapt to the tuning range (shifted.csv inputs when present).
    Tune {
        #[arg(long, value_enum)]
        mode: TuneMode,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Forecast one window; writes predictions-<model>.csv.
    Predict {
        #[arg(long, value_enum, default_value = "prompt")]
        model: ModelChoice,
        /// Window start; defaults to the last window of the test range.
        #[arg(long)]
        origin: Option<usize>,
        /// Read series.csv even when shifted.csv exists.
        #[arg(long)]
        clean: bool,
    },
    /// Metrics over every window of a split; writes eval-<model>-<split>.csv.
    Eval {
        #[arg(long, value_enum, default_value = "prompt")]
        model: ModelChoice,
        #[arg(long, value_enum, default_value = "tst")]
        split: SplitName,
        #[arg(long)]
        clean: bool,
    },
    /// Prompt vs finetune vs scratch across graph scales and seeds.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "10")]
        scales: Vec<usize>,
        /// Number of seeds (1..=N).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "prompt,finetune,scratch")]
        arms: Vec<String>,
        #[arg(long, default_value = "lag:2")]
        shift: String,
        #[arg(long)]
        steps: Option<usize>,
        /// Counts only: one step per arm, no pretraining or metrics.
        #[arg(long)]
        footprint: bool,
        /// Run (scale, seed) cells on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference check of every registered op and a tiny end-to-end model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter table of a checkpoint in the run directory.
    Inspect {
        #[arg(value_enum, default_value = "backbone")]
        target: InspectTarget,
    },
    /// Acceptance checks, one line each.
    Suite {
        #[arg(long, default_value = "fast")]
        level: String,
    },
}

/// Exit status for an error: 2 config, 3 data, 4 contract, 1 otherwise.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::SequenceTooShort { .. } => 3,
        Error::Contract(_) => 4,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "config",
        3 => "data",
        4 => "contract",
        _ => "runtime",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest {
            readings,
            edges,
            sigma2,
            anomalies,
            z_thresh,
        } => commands::ingest(&cli.run_dir, &readings, edges.as_deref(), sigma2, anomalies.then_some(z_thresh)),
        Command::Shiftgen {
            nodes,
            steps,
            seed,
            shift,
            period,
            noise,
            coupling,
            graph,
            shift_from,
        } => commands::shiftgen(
            &cli.run_dir,
            commands::ShiftgenArgs {
                nodes,
                steps,
                seed,
                shift,
                period,
                noise,
                coupling,
                graph,
                shift_from,
            },
        ),
        Command::Pretrain { cfg } => commands::pretrain(&cli.run_dir, &cfg),
        Command::Tune { mode, cfg } => commands::tune(&cli.run_dir, mode, &cfg),
        Command::Predict { model, origin, clean } => commands::predict(&cli.run_dir, model, origin, clean),
        Command::Eval { model, split, clean } => commands::eval(&cli.run_dir, model, split, clean),
        Command::Bench {
            scales,
            seeds,
            arms,
            shift,
            steps,
            footprint,
            parallel,
        } => commands::bench(&cli.run_dir, scales, seeds, &arms, &shift, steps, footprint, parallel),
        Command::Gradcheck { points, seed } => commands::gradcheck(points, seed),
        Command::Inspect { target } => commands::inspect(&cli.run_dir, target),
        Command::Suite { level } => commands::suite(&level),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = e.to_string().replace(['\n', '"'], " ");
            eprintln!("error code={} kind={} message=\"{msg}\"", exit_code(&e), kind(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
