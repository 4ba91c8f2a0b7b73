//! catrinet: train, evaluate and dissect the co-attention triple-LSTM
//! report generator. Every command is deterministic under a fixed seed
//! and config; failures exit nonzero with a machine-readable JSON line on
//! stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use catrinet::attention::BatchAvg;
use catrinet::config::RunConfig;
use catrinet::metrics::SdMode;
use catrinet::runner;
use catrinet::Error;

#[derive(Parser)]
#[command(name = "catrinet", version, about = "co-attention triple-LSTM report generation harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BatchAvgArg {
    /// divide batch cosine sums by the head count
    Paper,
    /// divide batch cosine sums by the batch size
    Batch,
}

impl From<BatchAvgArg> for BatchAvg {
    fn from(v: BatchAvgArg) -> Self {
        match v {
            BatchAvgArg::Paper => BatchAvg::PaperLiteral,
            BatchAvgArg::Batch => BatchAvg::BatchMean,
        }
    }
}

#[derive(Args)]
struct ConfigOverrides {
    /// run configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// override the training seed
    #[arg(long)]
    seed: Option<u64>,
    /// override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// drop the secondary head weighting (primary-only attention)
    #[arg(long)]
    disable_ca: bool,
    /// collapse the decoder to a single generation LSTM
    #[arg(long)]
    disable_tl: bool,
    /// batch aggregation rule for the cosine weights
    #[arg(long, value_enum)]
    batch_avg: Option<BatchAvgArg>,
}

impl ConfigOverrides {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.paths.out_dir = out.clone();
        }
        if self.disable_ca {
            cfg.ablation.disable_ca = true;
        }
        if self.disable_tl {
            cfg.ablation.disable_tl = true;
        }
        if let Some(avg) = self.batch_avg {
            cfg.batch_avg_mode = avg.into();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// teacher-forced training run; writes model.ckpt and the CSV logs
    Train(ConfigOverrides),
    /// beam-search generation plus caption metrics on one split
    Eval {
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// split to evaluate: train, val or test
        #[arg(long, default_value = "test")]
        split: String,
        /// beam width (overrides the config)
        #[arg(long)]
        beam: Option<usize>,
        /// checkpoint path (default: <out_dir>/model.ckpt)
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// train and score the four component variants under one seed
    Ablate(ConfigOverrides),
    /// per-head mean/SD/CI table and weight profile from a head log
    StatsHeads {
        /// head-weight CSV written by train
        #[arg(long)]
        log: PathBuf,
        /// output directory (default: the log's directory)
        #[arg(long)]
        out: Option<PathBuf>,
        /// confidence level
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// use the n-1 (sample) standard deviation
        #[arg(long)]
        sample_sd: bool,
    },
    /// generate the synthetic dataset splits
    GenData {
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    match cli.cmd {
        Cmd::Train(overrides) => {
            let cfg = overrides.load()?;
            let report = runner::run_train(&cfg)?;
            Ok(json!({
                "command": "train",
                "checkpoint": report.checkpoint,
                "parameter_count": report.parameter_count,
                "outcome": report.outcome,
            }))
        }
        Cmd::Eval {
            overrides,
            split,
            beam,
            ckpt,
        } => {
            let cfg = overrides.load()?;
            let beam_width = beam.unwrap_or(cfg.beam_width);
            let ckpt = ckpt.unwrap_or_else(|| cfg.paths.out_dir.join("model.ckpt"));
            let report = runner::run_eval(&ckpt, &cfg.paths.data_dir, &split, beam_width, &cfg.paths.out_dir)?;
            Ok(json!({
                "command": "eval",
                "split": split,
                "beam_width": beam_width,
                "report": report,
            }))
        }
        Cmd::Ablate(overrides) => {
            let cfg = overrides.load()?;
            let rows = runner::run_ablate(&cfg)?;
            Ok(json!({
                "command": "ablate",
                "table": cfg.paths.out_dir.join("ablation.csv"),
                "rows": rows,
            }))
        }
        Cmd::StatsHeads {
            log,
            out,
            level,
            sample_sd,
        } => {
            let out_dir = out.unwrap_or_else(|| log.parent().unwrap_or(std::path::Path::new(".")).to_path_buf());
            let mode = if sample_sd { SdMode::Sample } else { SdMode::Population };
            let stats = runner::run_stats_heads(&log, &out_dir, level, mode)?;
            Ok(json!({
                "command": "stats-heads",
                "table": out_dir.join("head_stats.csv"),
                "profile": out_dir.join("head_profile.svg"),
                "stats": stats,
            }))
        }
        Cmd::GenData { overrides } => {
            let mut cfg = overrides.load()?;
            if let Some(out) = overrides.out.as_ref() {
                // for gen-data, --out redirects the dataset directory
                cfg.paths.data_dir = out.clone();
            }
            if let Some(seed) = overrides.seed {
                cfg.data.seed = seed;
            }
            let (train, val, test) = runner::gen_data(&cfg)?;
            Ok(json!({
                "command": "gen-data",
                "data_dir": cfg.paths.data_dir,
                "train": train,
                "val": val,
                "test": test,
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            if e.use_stderr() {
                eprintln!("{}", json!({"error": e.to_string(), "kind": "usage"}));
                return ExitCode::from(2);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.to_string(), "kind": e.kind()}));
            ExitCode::FAILURE
        }
    }
}
