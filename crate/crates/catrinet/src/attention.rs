//! Cross-attention from text queries onto image features, with double
//! head weighting: learnable per-head gates (softmax-normalized primary
//! weights w_a) plus secondary weights w_dwa derived from per-head cosine
//! similarity against the dominant ("base") head.
//!
//! The secondary path runs on detached values from the previous training
//! iteration: cosines per sample, batch-aggregated cosine weights, their
//! harmonic mean lambda, and w_dwa = relu(lambda - w_cos). Head j's output
//! is scaled by w_a_j * (1 + w_dwa_j), so w_dwa = 0 reduces exactly to
//! primary-only attention while positive w_dwa amplifies heads that look
//! least like the base head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::tensor::{cosine, harmonic_lambda_raw, Bound, Graph, ParamStore, TensorRef};

/// How per-sample cosines aggregate over a batch: divide the batch sum by
/// the head count (the literal formula) or by the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchAvg {
    PaperLiteral,
    BatchMean,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub model_dim: usize,
    /// reciprocal guard for the harmonic mean
    pub eps_recip: f64,
    pub batch_avg: BatchAvg,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, model_dim: usize) -> Self {
        AttentionConfig {
            num_heads,
            model_dim,
            eps_recip: 1e-6,
            batch_avg: BatchAvg::PaperLiteral,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads < 2 {
            return Err(Error::Config(format!(
                "need at least 2 attention heads (a base and one other), got {}",
                self.num_heads
            )));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Per-iteration record of the double-weighting state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadWeightState {
    pub iteration: usize,
    /// softmax-normalized primary head weights
    pub w_a: Vec<f64>,
    pub base_idx: usize,
    /// batch-aggregated cosine weights per head
    pub w_cos: Vec<f64>,
    pub lambda: f64,
    /// relu-clamped secondary weights
    pub w_dwa: Vec<f64>,
    /// raw cosines per sample per head, retained for statistics
    pub per_sample_cos: Vec<Vec<f64>>,
}

impl HeadWeightState {
    /// Neutral state: uniform primary weights, no secondary modulation.
    pub fn initial(num_heads: usize) -> Self {
        HeadWeightState {
            iteration: 0,
            w_a: vec![1.0 / num_heads as f64; num_heads],
            base_idx: 0,
            w_cos: Vec::new(),
            lambda: 0.0,
            w_dwa: vec![0.0; num_heads],
            per_sample_cos: Vec::new(),
        }
    }

    /// True once cosines have been computed from a previous iteration.
    pub fn has_cosines(&self) -> bool {
        !self.w_cos.is_empty()
    }
}

/// Argmax of the primary weights; ties break to the lowest index.
pub fn select_base_head(w_a: &[f64]) -> usize {
    assert!(!w_a.is_empty(), "select_base_head: empty weights");
    let mut best = 0;
    for (i, &v) in w_a.iter().enumerate() {
        if v > w_a[best] {
            best = i;
        }
    }
    best
}

/// Per-sample cosines of every head's pooled vector against the base
/// head's, and their batch aggregate.
///
/// `pooled[k][j]` is sample k's pooled output vector for head j. The base
/// head is compared with itself, so its cosine is exactly 1 per sample.
/// Aggregation divides the batch sum by the head count (`PaperLiteral`)
/// or the batch size (`BatchMean`).
pub fn cosine_head_weights(
    pooled: &[Vec<Vec<f64>>],
    base_idx: usize,
    num_heads: usize,
    mode: BatchAvg,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    assert!(!pooled.is_empty(), "cosine_head_weights: empty batch");
    let per_sample: Vec<Vec<f64>> = pooled
        .iter()
        .map(|heads| {
            assert_eq!(heads.len(), num_heads, "cosine_head_weights: head count mismatch");
            (0..num_heads)
                .map(|j| {
                    if j == base_idx {
                        1.0
                    } else {
                        cosine(&heads[j], &heads[base_idx])
                    }
                })
                .collect()
        })
        .collect();
    let divisor = match mode {
        BatchAvg::PaperLiteral => num_heads as f64,
        BatchAvg::BatchMean => pooled.len() as f64,
    };
    let w_cos: Vec<f64> = (0..num_heads)
        .map(|j| per_sample.iter().map(|s| s[j]).sum::<f64>() / divisor)
        .collect();
    (per_sample, w_cos)
}

/// Harmonic mean of the cosine weights (guards in `harmonic_lambda_raw`).
pub fn harmonic_lambda(w_cos: &[f64], eps_recip: f64) -> f64 {
    harmonic_lambda_raw(w_cos, eps_recip)
}

/// Secondary weights: relu(lambda - w_cos_j).
pub fn dwa_weights(lambda: f64, w_cos: &[f64]) -> Vec<f64> {
    w_cos.iter().map(|&c| (lambda - c).max(0.0)).collect()
}

/// Precomputed key/value projections for one sample's context.
pub struct SampleContext {
    pub keys: TensorRef,
    pub values: TensorRef,
    pub len: usize,
}

/// Output of one forward pass: the combined, output-projected tensor and
/// the raw per-head outputs (before any weighting).
pub struct AttnOutput {
    pub combined: TensorRef,
    pub per_head: Vec<TensorRef>,
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub cfg: AttentionConfig,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    /// pre-softmax learnable gates behind w_a, shape [1 x N]
    pub gates: String,
}

impl CrossAttention {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: AttentionConfig) -> Self {
        cfg.validate().expect("invalid attention config");
        let d = cfg.model_dim;
        let gates = format!("{prefix}.gates");
        store.insert_const(&gates, 1, cfg.num_heads, 0.0);
        CrossAttention {
            cfg,
            wq: Linear::init(store, rng, &format!("{prefix}.wq"), d, d),
            wk: Linear::init(store, rng, &format!("{prefix}.wk"), d, d),
            wv: Linear::init(store, rng, &format!("{prefix}.wv"), d, d),
            wo: Linear::init(store, rng, &format!("{prefix}.wo"), d, d),
            gates,
        }
    }

    /// Differentiable primary weights: softmax over the gate row.
    pub fn w_a_node(&self, g: &mut Graph, bound: &Bound) -> TensorRef {
        let gates = bound.id(&self.gates);
        g.softmax(gates, 1)
    }

    /// Primary weights as plain values from the store.
    pub fn w_a_values(&self, store: &ParamStore) -> Vec<f64> {
        let gates = &store.get(&self.gates).data;
        let maxv = gates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = gates.iter().map(|&x| (x - maxv).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Projects a `[Tk x d]` context into keys and values, reused across
    /// decode steps. Tk = 0 is an empty-context error.
    pub fn prepare_context(&self, g: &mut Graph, bound: &Bound, ctx: TensorRef) -> SampleContext {
        let (tk, d) = g.dims(ctx);
        assert!(tk > 0, "cross-attention: empty context (Tk = 0)");
        assert_eq!(d, self.cfg.model_dim, "cross-attention: context dim mismatch");
        SampleContext {
            keys: self.wk.forward(g, bound, ctx),
            values: self.wv.forward(g, bound, ctx),
            len: tk,
        }
    }

    /// Scaled-dot-product attention per head plus double weighting.
    ///
    /// `w_dwa` is applied as a detached per-head factor `1 + w_dwa_j` on
    /// top of the differentiable primary weight w_a_j; gradients flow
    /// through the attention path and the gates only.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        queries: TensorRef,
        ctx: &SampleContext,
        w_a_node: TensorRef,
        w_dwa: &[f64],
    ) -> AttnOutput {
        let n = self.cfg.num_heads;
        let dh = self.cfg.head_dim();
        assert_eq!(w_dwa.len(), n, "cross-attention: w_dwa length mismatch");
        let q = self.wq.forward(g, bound, queries);
        let per_head = self.per_head_attention(g, q, ctx, dh, n);
        let combined = self.apply_double_weights(g, bound, &per_head, w_a_node, w_dwa);
        AttnOutput { combined, per_head }
    }

    fn per_head_attention(
        &self,
        g: &mut Graph,
        q: TensorRef,
        ctx: &SampleContext,
        dh: usize,
        n: usize,
    ) -> Vec<TensorRef> {
        let scale = 1.0 / (dh as f64).sqrt();
        (0..n)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
                let kh = g.slice_cols(ctx.keys, h * dh, (h + 1) * dh);
                let vh = g.slice_cols(ctx.values, h * dh, (h + 1) * dh);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let scaled = g.scale(scores, scale);
                let attn = g.softmax(scaled, 1);
                g.matmul(attn, vh)
            })
            .collect()
    }

    /// Scales head j by w_a_j * (1 + w_dwa_j), concatenates and projects.
    /// With w_dwa = 0 this is exactly primary-only weighted attention.
    pub fn apply_double_weights(
        &self,
        g: &mut Graph,
        bound: &Bound,
        per_head: &[TensorRef],
        w_a_node: TensorRef,
        w_dwa: &[f64],
    ) -> TensorRef {
        let weighted: Vec<TensorRef> = per_head
            .iter()
            .enumerate()
            .map(|(j, &head)| {
                let wa_j = g.select_element(w_a_node, 0, j);
                let primary = g.mul_scalar_node(head, wa_j);
                g.scale(primary, 1.0 + w_dwa[j])
            })
            .collect();
        let cat = g.concat_cols(&weighted);
        self.wo.forward(g, bound, cat)
    }
}

/// Advances the head-weight state for a new iteration from the previous
/// iteration's pooled (detached) per-head outputs. With no previous
/// outputs the secondary weights stay zero.
pub fn advance_head_state(
    iteration: usize,
    w_a: Vec<f64>,
    pooled_prev: Option<&[Vec<Vec<f64>>]>,
    cfg: &AttentionConfig,
) -> HeadWeightState {
    let base_idx = select_base_head(&w_a);
    match pooled_prev {
        Some(pooled) if !pooled.is_empty() => {
            let (per_sample, w_cos) = cosine_head_weights(pooled, base_idx, cfg.num_heads, cfg.batch_avg);
            let lambda = harmonic_lambda(&w_cos, cfg.eps_recip);
            let w_dwa = dwa_weights(lambda, &w_cos);
            HeadWeightState {
                iteration,
                w_a,
                base_idx,
                w_cos,
                lambda,
                w_dwa,
                per_sample_cos: per_sample,
            }
        }
        _ => {
            let n = cfg.num_heads;
            HeadWeightState {
                iteration,
                w_a,
                base_idx,
                w_cos: Vec::new(),
                lambda: 0.0,
                w_dwa: vec![0.0; n],
                per_sample_cos: Vec::new(),
            }
        }
    }
}
