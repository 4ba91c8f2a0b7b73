//! Training losses: caption cross-entropy for both generation stages,
//! multi-label soft margin for the tags, and their weighted combination
//! total = loss_t + alpha * loss_1 + beta * loss_2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorRef};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.beta > 1.0 && self.beta <= 10.0) {
            return Err(Error::Config(format!("beta must be in (1, 10], got {}", self.beta)));
        }
        Ok(())
    }
}

/// Graph nodes of the combined loss.
pub struct LossNodes {
    pub loss_t: TensorRef,
    pub loss_1: TensorRef,
    pub loss_2: TensorRef,
    pub total: TensorRef,
}

/// Extracted scalar values for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_t: f64,
    pub loss_1: f64,
    pub loss_2: f64,
    pub total: f64,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            loss_t: g.value(self.loss_t)[0],
            loss_1: g.value(self.loss_1)[0],
            loss_2: g.value(self.loss_2)[0],
            total: g.value(self.total)[0],
        }
    }
}

/// Mean over non-pad positions of -log p(gold_t). `dists` are per-step
/// probability rows over the vocabulary; `pad_mask[t] = true` marks
/// positions excluded from the mean.
pub fn caption_ce(g: &mut Graph, dists: &[TensorRef], gold: &[usize], pad_mask: Option<&[bool]>) -> TensorRef {
    assert_eq!(dists.len(), gold.len(), "caption_ce: length mismatch");
    assert!(!dists.is_empty(), "caption_ce: empty sequence");
    if let Some(mask) = pad_mask {
        assert_eq!(mask.len(), gold.len(), "caption_ce: mask length mismatch");
    }
    let mut terms = Vec::new();
    for (t, (&dist, &y)) in dists.iter().zip(gold).enumerate() {
        if pad_mask.map(|m| m[t]).unwrap_or(false) {
            continue;
        }
        let v = g.dims(dist).1;
        assert!(y < v, "caption_ce: gold id {y} outside vocabulary {v}");
        let p = g.select_element(dist, 0, y);
        let lp = g.log(p);
        terms.push(lp);
    }
    assert!(!terms.is_empty(), "caption_ce: all positions masked");
    let total = g.add_n(&terms);
    g.scale(total, -1.0 / terms.len() as f64)
}

/// Multi-label soft margin over tag logits:
/// -(1/C) * sum_i [ Tag_i * log sig(x_i) + (1 - Tag_i) * log sig(-x_i) ],
/// with both logs evaluated in log-space.
pub fn multilabel_soft_margin(g: &mut Graph, logits: TensorRef, tags: &[f64]) -> TensorRef {
    let (r, c) = g.dims(logits);
    assert_eq!(r, 1, "multilabel_soft_margin: logits must be a row");
    assert_eq!(c, tags.len(), "multilabel_soft_margin: tag length mismatch");
    assert!(tags.iter().all(|&t| t == 0.0 || t == 1.0), "tags must be binary");
    let pos_mask = g.constant(tags.to_vec(), 1, c);
    let neg_mask = g.constant(tags.iter().map(|t| 1.0 - t).collect(), 1, c);
    let ls_pos = g.log_sigmoid(logits);
    let neg_logits = g.scale(logits, -1.0);
    let ls_neg = g.log_sigmoid(neg_logits);
    let pos_term = g.mul(ls_pos, pos_mask);
    let neg_term = g.mul(ls_neg, neg_mask);
    let both = g.add(pos_term, neg_term);
    let sum = g.sum_all(both);
    g.scale(sum, -1.0 / c as f64)
}

/// total = loss_t + alpha * loss_1 + beta * loss_2.
pub fn combine(g: &mut Graph, loss_t: TensorRef, loss_1: TensorRef, loss_2: TensorRef, w: &LossWeights) -> LossNodes {
    let a1 = g.scale(loss_1, w.alpha);
    let b2 = g.scale(loss_2, w.beta);
    let total = g.add_n(&[loss_t, a1, b2]);
    LossNodes {
        loss_t,
        loss_1,
        loss_2,
        total,
    }
}
