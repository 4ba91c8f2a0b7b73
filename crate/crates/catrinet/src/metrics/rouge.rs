//! ROUGE-L: LCS-based F-measure, max over references, mean over the corpus.

use super::EvalPair;

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Per-pair F_beta over LCS recall/precision; 0 when the LCS is empty.
pub fn rouge_l(pairs: &[EvalPair], beta_sq: f64) -> f64 {
    assert!(!pairs.is_empty(), "rouge_l: empty corpus");
    let mut sum = 0.0;
    for pair in pairs {
        let mut best: f64 = 0.0;
        for r in &pair.references {
            let lcs = lcs_len(&pair.hypothesis, r) as f64;
            if lcs == 0.0 {
                continue;
            }
            let recall = lcs / r.len() as f64;
            let precision = lcs / pair.hypothesis.len() as f64;
            let f = (1.0 + beta_sq) * recall * precision / (recall + beta_sq * precision);
            best = best.max(f);
        }
        sum += best;
    }
    sum / pairs.len() as f64
}
