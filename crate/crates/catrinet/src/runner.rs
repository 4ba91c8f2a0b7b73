//! End-to-end drivers behind the CLI commands: data generation, training,
//! evaluation with beam search, the four-variant ablation, and
//! head-statistics export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{generate, load_jsonl, save_jsonl, split, Sample};
use crate::error::{Error, Result};
use crate::metrics::{corpus_eval, HeadWeightLog, MetricsReport, SdMode};
use crate::model::{AblationFlags, CaTriNet, GenOutput};
use crate::train::{train, TrainOutcome, TrainSettings};
use crate::vocab::Vocabulary;

/// Worker cap for per-sample generation; generation is pure, results are
/// merged in sample order, so the count never changes output.
pub fn worker_count() -> usize {
    std::env::var("CATRINET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub fn gen_data(cfg: &RunConfig) -> Result<(usize, usize, usize)> {
    cfg.validate()?;
    let samples = generate(&cfg.data)?;
    let (train_set, val_set, test_set) = split(&samples, cfg.data.split, cfg.data.seed)?;
    std::fs::create_dir_all(&cfg.paths.data_dir)?;
    save_jsonl(&cfg.paths.data_dir.join("train.jsonl"), &train_set)?;
    save_jsonl(&cfg.paths.data_dir.join("val.jsonl"), &val_set)?;
    save_jsonl(&cfg.paths.data_dir.join("test.jsonl"), &test_set)?;
    Ok((train_set.len(), val_set.len(), test_set.len()))
}

pub fn load_split(data_dir: &Path, name: &str) -> Result<Vec<Sample>> {
    let path = data_dir.join(format!("{name}.jsonl"));
    if !path.exists() {
        return Err(Error::Config(format!("{}: split file not found", path.display())));
    }
    load_jsonl(&path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub parameter_count: usize,
}

fn build_model(cfg: &RunConfig, train_set: &[Sample], flags: AblationFlags) -> Result<CaTriNet> {
    let vocab = Vocabulary::build(train_set.iter().map(|s| s.report.as_str()), 1);
    CaTriNet::init(
        cfg.model,
        flags,
        cfg.batch_avg_mode,
        vocab,
        cfg.data.tag_classes,
        cfg.data.image_size,
        cfg.train.seed,
    )
}

fn settings_of(cfg: &RunConfig) -> TrainSettings {
    TrainSettings {
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        seed: cfg.train.seed,
        weights: cfg.weights(),
        optim: cfg.optimizer,
        stop_below_train_total: cfg.train.stop_below_train_total,
    }
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let train_set = load_split(&cfg.paths.data_dir, "train")?;
    let val_set = load_split(&cfg.paths.data_dir, "val").unwrap_or_default();
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training split is empty".into()));
    }
    let mut model = build_model(cfg, &train_set, cfg.ablation)?;
    let parameter_count = model.store.scalar_count();
    let outcome = train(&mut model, &train_set, &val_set, &settings_of(cfg), &cfg.paths.out_dir)?;
    Ok(TrainReport {
        outcome,
        checkpoint: cfg.paths.out_dir.join("model.ckpt"),
        parameter_count,
    })
}

/// Beam-search generation for every sample, ordered by sample index.
/// Worker count comes from CATRINET_THREADS; the merge is id-ordered, so
/// results do not depend on it.
pub fn generate_all(model: &CaTriNet, samples: &[Sample], beam_width: usize, max_len: usize) -> Vec<GenOutput> {
    let workers = worker_count().min(samples.len().max(1));
    if workers <= 1 {
        return samples
            .iter()
            .map(|s| model.beam_search(&model.store, &s.image, beam_width, max_len))
            .collect();
    }
    let mut results: Vec<Option<GenOutput>> = Vec::new();
    results.resize_with(samples.len(), || None);
    let chunk = samples.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, out_chunk) in results.chunks_mut(chunk).enumerate() {
            let start = w * chunk;
            scope.spawn(move || {
                for (i, slot) in out_chunk.iter_mut().enumerate() {
                    let s = &samples[start + i];
                    *slot = Some(model.beam_search(&model.store, &s.image, beam_width, max_len));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("worker filled every slot")).collect()
}

#[derive(Serialize)]
struct HypRow<'a> {
    id: &'a str,
    tokens: &'a [usize],
    text: &'a str,
    logprob: f64,
    label_probs: &'a [f64],
}

#[derive(Serialize)]
struct RefRow<'a> {
    id: &'a str,
    refs: [&'a str; 1],
}

pub fn run_eval(
    ckpt: &Path,
    data_dir: &Path,
    split_name: &str,
    beam_width: usize,
    out_dir: &Path,
) -> Result<MetricsReport> {
    if beam_width < 1 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    let model = CaTriNet::load_checkpoint(ckpt)?;
    let samples = load_split(data_dir, split_name)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput(format!("split '{split_name}' is empty")));
    }
    std::fs::create_dir_all(out_dir)?;
    let outputs = generate_all(&model, &samples, beam_width, model.cfg.max_len);
    let mut hyp_lines = String::new();
    let mut ref_lines = String::new();
    for (s, o) in samples.iter().zip(&outputs) {
        let hyp = HypRow {
            id: &s.id,
            tokens: &o.tokens,
            text: &o.text,
            logprob: o.logprob,
            label_probs: &o.label_probs,
        };
        let _ = writeln!(hyp_lines, "{}", serde_json::to_string(&hyp)?);
        let rr = RefRow {
            id: &s.id,
            refs: [s.report.as_str()],
        };
        let _ = writeln!(ref_lines, "{}", serde_json::to_string(&rr)?);
    }
    let hyp_path = out_dir.join(format!("hyps_{split_name}.jsonl"));
    let ref_path = out_dir.join(format!("refs_{split_name}.jsonl"));
    std::fs::write(&hyp_path, hyp_lines)?;
    std::fs::write(&ref_path, ref_lines)?;
    let report = corpus_eval(&hyp_path, &ref_path)?;
    std::fs::write(
        out_dir.join(format!("metrics_{split_name}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub variant: String,
    pub parameter_count: usize,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

/// Trains and evaluates the four ablation variants under one shared seed:
/// plain attention + single LSTM, +CA, +TL, and the full model. Writes
/// `ablation.csv` and per-variant artifacts under `out_dir`.
pub fn run_ablate(cfg: &RunConfig) -> Result<Vec<AblateRow>> {
    cfg.validate()?;
    let train_set = load_split(&cfg.paths.data_dir, "train")?;
    let val_set = load_split(&cfg.paths.data_dir, "val").unwrap_or_default();
    let test_name = "test";
    let variants: [(&str, AblationFlags); 4] = [
        (
            "baseline",
            AblationFlags {
                disable_ca: true,
                disable_tl: true,
            },
        ),
        (
            "ca",
            AblationFlags {
                disable_ca: false,
                disable_tl: true,
            },
        ),
        (
            "tl",
            AblationFlags {
                disable_ca: true,
                disable_tl: false,
            },
        ),
        (
            "full",
            AblationFlags {
                disable_ca: false,
                disable_tl: false,
            },
        ),
    ];
    let mut rows = Vec::with_capacity(4);
    for (name, flags) in variants {
        let var_dir = cfg.paths.out_dir.join("ablate").join(name);
        let mut model = build_model(cfg, &train_set, flags)?;
        let parameter_count = model.store.scalar_count();
        train(&mut model, &train_set, &val_set, &settings_of(cfg), &var_dir)?;
        let report = run_eval(
            &var_dir.join("model.ckpt"),
            &cfg.paths.data_dir,
            test_name,
            cfg.beam_width,
            &var_dir,
        )?;
        rows.push(AblateRow {
            variant: name.to_string(),
            parameter_count,
            b1: report.scaled.b1,
            b2: report.scaled.b2,
            b3: report.scaled.b3,
            b4: report.scaled.b4,
            rouge_l: report.scaled.rouge_l,
            cider: report.scaled.cider,
        });
    }
    let mut csv = String::from("variant,params,b1,b2,b3,b4,rouge_l,cider\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.variant, r.parameter_count, r.b1, r.b2, r.b3, r.b4, r.rouge_l, r.cider
        );
    }
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    std::fs::write(cfg.paths.out_dir.join("ablation.csv"), csv)?;
    Ok(rows)
}

/// Parses a head-weight log, writes the per-head statistics table and the
/// single-vs-double weight profile SVG.
pub fn run_stats_heads(log_path: &Path, out_dir: &Path, level: f64, mode: SdMode) -> Result<Vec<crate::metrics::HeadStats>> {
    let log = HeadWeightLog::parse(log_path)?;
    let stats = log.cosine_stats(level, mode)?;
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("head,mean,sd,ci_halfwidth,n\n");
    for s in &stats {
        let _ = writeln!(csv, "{},{:.6},{:.6},{:.6},{}", s.head, s.mean, s.sd, s.ci_halfwidth, s.n);
    }
    std::fs::write(out_dir.join("head_stats.csv"), csv)?;
    let (single, double) = log.final_weights();
    std::fs::write(
        out_dir.join("head_profile.svg"),
        crate::metrics::weight_profile_svg(&single, &double),
    )?;
    Ok(stats)
}
