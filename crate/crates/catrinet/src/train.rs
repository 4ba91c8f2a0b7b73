//! Teacher-forced training: ADAM over the parameter store, per-step loss
//! logging, per-iteration head-weight logging, and a checkpoint at the
//! best validation loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::advance_head_state;
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, LossWeights};
use crate::model::CaTriNet;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    0.0004
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// ADAM with bias correction; state keyed by parameter name so updates are
/// order-deterministic.
pub struct Adam {
    cfg: OptimConfig,
    t: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - self.cfg.beta1.powf(t);
        let c2 = 1.0 - self.cfg.beta2.powf(t);
        for (name, grad) in grads {
            let p = store.get_mut(name);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * grad[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.data[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub iterations: usize,
    pub best_val_total: f64,
    pub best_epoch: usize,
    pub final_train_total: f64,
    pub stopped_early: bool,
}

pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    /// stop once the epoch-mean training total drops below this
    pub stop_below_train_total: Option<f64>,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.12e}")
}

/// Runs the full training loop, writing `train_log.csv`,
/// `head_weights.csv` and `model.ckpt` (best validation total) into
/// `out_dir`. Aborts with a diagnostic at the first non-finite loss.
pub fn train(
    model: &mut CaTriNet,
    train_set: &[Sample],
    val_set: &[Sample],
    settings: &TrainSettings,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training split is empty".into()));
    }
    settings.weights.validate()?;
    settings.optim.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let n_heads = model.cfg.heads;
    let ca_enabled = !model.flags.disable_ca;

    let mut loss_csv = String::new();
    if ca_enabled {
        let dwa_cols: Vec<String> = (0..n_heads).map(|h| format!("w_dwa_{h}")).collect();
        let _ = writeln!(loss_csv, "step,loss_t,loss_1,loss_2,total,lambda,{}", dwa_cols.join(","));
    } else {
        let _ = writeln!(loss_csv, "step,loss_t,loss_1,loss_2,total");
    }
    let mut head_csv = String::new();
    if ca_enabled {
        let _ = writeln!(head_csv, "iteration,head,w_a,w_cos,lambda,w_dwa");
    } else {
        let _ = writeln!(head_csv, "iteration,head,w_a");
    }

    let mut adam = Adam::new(settings.optim);
    let mut pooled_prev: Option<Vec<Vec<Vec<f64>>>> = None;
    let mut iteration = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut last_train_total = f64::INFINITY;
    let mut stopped_early = false;
    let ckpt_path = out_dir.join("model.ckpt");

    let mut epochs_run = 0usize;
    for epoch in 0..settings.epochs {
        epochs_run = epoch + 1;
        // seeded epoch shuffle
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            // advance the double-weighting state from last iteration's
            // detached head outputs
            let state = if ca_enabled {
                advance_head_state(
                    iteration,
                    model.cross.w_a_values(&model.store),
                    pooled_prev.as_deref(),
                    &model.attn_config(),
                )
            } else {
                let mut s = crate::attention::HeadWeightState::initial(n_heads);
                s.iteration = iteration;
                s.w_a = model.cross.w_a_values(&model.store);
                s.base_idx = crate::attention::select_base_head(&s.w_a);
                s
            };
            let mut fwd = model.forward_train(&model.store, &batch, &settings.weights, &state.w_dwa, None);
            let breakdown = fwd.nodes.breakdown(&fwd.graph);
            if !breakdown.total.is_finite() {
                let diag = fwd
                    .graph
                    .first_non_finite()
                    .map(|(_, label)| label)
                    .unwrap_or_else(|| "loss only".to_string());
                return Err(Error::NonFinite(format!(
                    "training loss at iteration {iteration}: first non-finite tensor is {diag}"
                )));
            }
            fwd.graph.backward(fwd.nodes.total);
            let grads: BTreeMap<String, Vec<f64>> = fwd
                .bound
                .iter()
                .filter_map(|(n, t)| fwd.graph.grad(*t).map(|gr| (n.clone(), gr.to_vec())))
                .collect();
            adam.step(&mut model.store, &grads);
            pooled_prev = Some(fwd.pooled);
            log_step(&mut loss_csv, iteration, &breakdown, &state, ca_enabled, n_heads);
            if ca_enabled && state.has_cosines() {
                for h in 0..n_heads {
                    let _ = writeln!(
                        head_csv,
                        "{},{},{},{},{},{}",
                        iteration,
                        h,
                        fmt_f(state.w_a[h]),
                        fmt_f(state.w_cos[h]),
                        fmt_f(state.lambda),
                        fmt_f(state.w_dwa[h])
                    );
                }
            } else if !ca_enabled {
                for h in 0..n_heads {
                    let _ = writeln!(head_csv, "{},{},{}", iteration, h, fmt_f(state.w_a[h]));
                }
            }
            model.head_state = state;
            epoch_total += breakdown.total;
            epoch_batches += 1;
            iteration += 1;
        }
        last_train_total = epoch_total / epoch_batches as f64;

        // validation pass (teacher-forced, no updates)
        let val_total = if val_set.is_empty() {
            last_train_total
        } else {
            validation_loss(model, val_set, settings)?
        };
        if val_total < best_val {
            best_val = val_total;
            best_epoch = epoch;
            model.save_checkpoint(&ckpt_path)?;
        }
        if let Some(target) = settings.stop_below_train_total {
            if last_train_total < target {
                stopped_early = true;
                break;
            }
        }
    }
    // a degenerate schedule (0 epochs) still produces a checkpoint
    if !ckpt_path.exists() {
        model.save_checkpoint(&ckpt_path)?;
    }
    std::fs::write(out_dir.join("train_log.csv"), loss_csv)?;
    std::fs::write(out_dir.join("head_weights.csv"), head_csv)?;
    Ok(TrainOutcome {
        epochs_run,
        iterations: iteration,
        best_val_total: best_val,
        best_epoch,
        final_train_total: last_train_total,
        stopped_early,
    })
}

fn log_step(
    csv: &mut String,
    step: usize,
    b: &LossBreakdown,
    state: &crate::attention::HeadWeightState,
    ca_enabled: bool,
    n_heads: usize,
) {
    if ca_enabled {
        let dwa: Vec<String> = (0..n_heads).map(|h| fmt_f(state.w_dwa[h])).collect();
        let _ = writeln!(
            csv,
            "{step},{},{},{},{},{},{}",
            fmt_f(b.loss_t),
            fmt_f(b.loss_1),
            fmt_f(b.loss_2),
            fmt_f(b.total),
            fmt_f(state.lambda),
            dwa.join(",")
        );
    } else {
        let _ = writeln!(
            csv,
            "{step},{},{},{},{}",
            fmt_f(b.loss_t),
            fmt_f(b.loss_1),
            fmt_f(b.loss_2),
            fmt_f(b.total)
        );
    }
}

/// Mean teacher-forced total over a split, without parameter updates or
/// state advancement.
pub fn validation_loss(model: &CaTriNet, val_set: &[Sample], settings: &TrainSettings) -> Result<f64> {
    let w_dwa = model.effective_w_dwa();
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in val_set.chunks(settings.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let fwd = model.forward_train(&model.store, &batch, &settings.weights, &w_dwa, None);
        let b = fwd.nodes.breakdown(&fwd.graph);
        if !b.total.is_finite() {
            return Err(Error::NonFinite("validation loss".into()));
        }
        total += b.total;
        batches += 1;
    }
    Ok(total / batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec};
    use crate::model::{AblationFlags, ModelConfig};
    use crate::vocab::Vocabulary;

    fn settings(epochs: usize, lr: f64) -> TrainSettings {
        TrainSettings {
            batch_size: 4,
            epochs,
            seed: 1,
            weights: LossWeights::default(),
            optim: OptimConfig {
                lr,
                ..OptimConfig::default()
            },
            stop_below_train_total: None,
        }
    }

    fn tiny_setup(seed: u64) -> (Vec<Sample>, CaTriNet) {
        let spec = CorpusSpec {
            num_samples: 8,
            abnormal_fraction: 0.5,
            tag_classes: 6,
            image_size: 8,
            noise: 0.02,
            seed,
            split: [0.7, 0.1, 0.2],
            templates: None,
        };
        let samples = generate(&spec).unwrap();
        let vocab = Vocabulary::build(samples.iter().map(|s| s.report.as_str()), 1);
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            patch_size: 4,
            ff_mult: 2,
            max_len: 16,
            eps_recip: 1e-6,
        };
        let model = CaTriNet::init(
            cfg,
            AblationFlags::default(),
            crate::attention::BatchAvg::PaperLiteral,
            vocab,
            6,
            8,
            seed,
        )
        .unwrap();
        (samples, model)
    }

    #[test]
    fn adam_moves_parameters_against_the_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0, -1.0], 1, 2);
        let mut adam = Adam::new(OptimConfig {
            lr: 0.1,
            ..OptimConfig::default()
        });
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0, -2.0]);
        adam.step(&mut store, &grads);
        let p = &store.get("w").data;
        assert!(p[0] < 1.0, "positive gradient must decrease the weight");
        assert!(p[1] > -1.0, "negative gradient must increase the weight");
    }

    #[test]
    fn loss_decreases_over_a_few_epochs() {
        let (samples, mut model) = tiny_setup(20);
        let dir = tempfile::tempdir().unwrap();
        let s = settings(1, 0.01);
        let first = train(&mut model, &samples, &[], &s, dir.path()).unwrap();
        let more = train(&mut model, &samples, &[], &settings(8, 0.01), dir.path()).unwrap();
        assert!(
            more.final_train_total < first.final_train_total,
            "{} then {}",
            first.final_train_total,
            more.final_train_total
        );
    }

    #[test]
    fn training_is_bit_deterministic() {
        let run = || {
            let (samples, mut model) = tiny_setup(21);
            let dir = tempfile::tempdir().unwrap();
            let outcome = train(&mut model, &samples[..6], &samples[6..], &settings(3, 0.005), dir.path()).unwrap();
            let ckpt = std::fs::read(dir.path().join("model.ckpt")).unwrap();
            let logs = std::fs::read(dir.path().join("train_log.csv")).unwrap();
            let heads = std::fs::read(dir.path().join("head_weights.csv")).unwrap();
            (outcome.final_train_total.to_bits(), ckpt, logs, heads)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1, "checkpoints differ");
        assert_eq!(a.2, b.2, "loss logs differ");
        assert_eq!(a.3, b.3, "head logs differ");
    }

    #[test]
    fn head_log_starts_once_cosines_exist() {
        let (samples, mut model) = tiny_setup(22);
        let dir = tempfile::tempdir().unwrap();
        train(&mut model, &samples, &[], &settings(2, 0.005), dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("head_weights.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,head,w_a,w_cos,lambda,w_dwa");
        let first_row = lines.next().expect("head log must have data rows");
        assert!(
            first_row.starts_with("1,"),
            "cosines exist from iteration 1 on, got row: {first_row}"
        );
    }

    #[test]
    fn disable_ca_drops_dwa_columns() {
        let spec = CorpusSpec {
            num_samples: 6,
            abnormal_fraction: 0.5,
            tag_classes: 6,
            image_size: 8,
            noise: 0.02,
            seed: 23,
            split: [0.7, 0.1, 0.2],
            templates: None,
        };
        let samples = generate(&spec).unwrap();
        let vocab = Vocabulary::build(samples.iter().map(|s| s.report.as_str()), 1);
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            patch_size: 4,
            ff_mult: 2,
            max_len: 16,
            eps_recip: 1e-6,
        };
        let mut model = CaTriNet::init(
            cfg,
            AblationFlags {
                disable_ca: true,
                disable_tl: false,
            },
            crate::attention::BatchAvg::PaperLiteral,
            vocab,
            6,
            8,
            23,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        train(&mut model, &samples, &[], &settings(1, 0.005), dir.path()).unwrap();
        let loss_log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert!(!loss_log.contains("w_dwa"), "loss log must not mention w_dwa");
        assert!(!loss_log.contains("lambda"));
        let head_log = std::fs::read_to_string(dir.path().join("head_weights.csv")).unwrap();
        assert_eq!(head_log.lines().next().unwrap(), "iteration,head,w_a");
    }

    #[test]
    fn early_stop_honors_the_target() {
        let (samples, mut model) = tiny_setup(24);
        let dir = tempfile::tempdir().unwrap();
        let mut s = settings(500, 0.02);
        s.stop_below_train_total = Some(3.0);
        let outcome = train(&mut model, &samples, &[], &s, dir.path()).unwrap();
        assert!(outcome.stopped_early);
        assert!(outcome.final_train_total < 3.0);
        assert!(outcome.epochs_run < 500);
    }
}
