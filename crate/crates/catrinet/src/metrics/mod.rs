//! Caption evaluation: BLEU-1..4, ROUGE-L, CIDEr, and per-head statistics.
//! All scores are pure functions of the token sequences, deterministic and
//! order-invariant over the corpus.

mod bleu;
mod cider;
mod rouge;
mod stats;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bleu::bleu;
pub use cider::cider;
pub use rouge::rouge_l;
pub use stats::{ci_halfwidth, head_stats, weight_profile_svg, HeadStats, HeadWeightLog, SdMode};

/// One evaluation unit: a hypothesis against one or more references.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Lowercase, split on whitespace, strip terminal punctuation per token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let w = w.to_lowercase();
            let t = w.trim_end_matches(['.', ',', ';', ':', '!', '?']);
            if t.is_empty() {
                None
            } else {
                Some(t.to_string())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScaledScores {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

/// The six scores, raw and in the x100 reporting convention.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub scaled: ScaledScores,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heads: Option<Vec<HeadStats>>,
}

impl MetricsReport {
    pub fn from_pairs(pairs: &[EvalPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("no evaluation pairs".into()));
        }
        let b1 = bleu(pairs, 1);
        let b2 = bleu(pairs, 2);
        let b3 = bleu(pairs, 3);
        let b4 = bleu(pairs, 4);
        let rouge = rouge_l(pairs, 1.2 * 1.2);
        let cid = cider(pairs, 4, 6.0);
        Ok(MetricsReport {
            bleu1: b1,
            bleu2: b2,
            bleu3: b3,
            bleu4: b4,
            rouge_l: rouge,
            cider: cid,
            scaled: ScaledScores {
                b1: b1 * 100.0,
                b2: b2 * 100.0,
                b3: b3 * 100.0,
                b4: b4 * 100.0,
                rouge_l: rouge * 100.0,
                cider: cid * 100.0,
            },
            heads: None,
        })
    }
}

#[derive(Debug, Deserialize)]
struct HypRow {
    id: String,
    text: String,
}

#[derive(Debug, Deserialize)]
struct RefRow {
    id: String,
    refs: Vec<String>,
}

/// Reads hypothesis and reference JSONL files, aligns them by id and
/// evaluates. Ids must match exactly on both sides.
pub fn corpus_eval(hyp_path: &Path, ref_path: &Path) -> Result<MetricsReport> {
    let hyp_text = fs::read_to_string(hyp_path)?;
    let ref_text = fs::read_to_string(ref_path)?;
    let mut hyps: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, line) in hyp_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: HypRow = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", hyp_path.display(), lineno + 1)))?;
        hyps.insert(row.id, row.text);
    }
    let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (lineno, line) in ref_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: RefRow = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", ref_path.display(), lineno + 1)))?;
        if row.refs.is_empty() {
            return Err(Error::Validation(format!(
                "{}:{}: id {} has no references",
                ref_path.display(),
                lineno + 1,
                row.id
            )));
        }
        refs.insert(row.id, row.refs);
    }
    align_and_eval(&hyps, &refs)
}

fn align_and_eval(hyps: &BTreeMap<String, String>, refs: &BTreeMap<String, Vec<String>>) -> Result<MetricsReport> {
    let missing_refs: Vec<&String> = hyps.keys().filter(|id| !refs.contains_key(*id)).collect();
    let missing_hyps: Vec<&String> = refs.keys().filter(|id| !hyps.contains_key(*id)).collect();
    if !missing_refs.is_empty() || !missing_hyps.is_empty() {
        return Err(Error::Alignment(format!(
            "ids without references: {:?}; ids without hypotheses: {:?}",
            missing_refs, missing_hyps
        )));
    }
    let pairs: Vec<EvalPair> = hyps
        .iter()
        .map(|(id, text)| EvalPair {
            id: id.clone(),
            hypothesis: tokenize(text),
            references: refs[id].iter().map(|r| tokenize(r)).collect(),
        })
        .collect();
    MetricsReport::from_pairs(&pairs)
}

#[cfg(test)]
mod tests;
