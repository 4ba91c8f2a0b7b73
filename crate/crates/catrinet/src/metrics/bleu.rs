//! Corpus-level BLEU: geometric mean of clipped modified n-gram precisions
//! with the exp(1 - r/c) brevity penalty and add-epsilon smoothing on zero
//! counts. Effective reference length is the closest to the hypothesis,
//! ties broken toward the shorter reference.

use std::collections::HashMap;

use super::EvalPair;

const SMOOTH_EPS: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu(pairs: &[EvalPair], max_n: usize) -> f64 {
    assert!((1..=4).contains(&max_n), "bleu: max_n must be in 1..=4");
    assert!(!pairs.is_empty(), "bleu: empty hypothesis set");
    let mut clipped = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for pair in pairs {
        assert!(!pair.references.is_empty(), "bleu: pair {} has no references", pair.id);
        let h = &pair.hypothesis;
        hyp_len += h.len();
        ref_len += pair
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&rl| (rl.abs_diff(h.len()), rl))
            .unwrap();
        let ref_counts: Vec<HashMap<&[String], usize>> = (1..=max_n)
            .map(|n| {
                let mut merged: HashMap<&[String], usize> = HashMap::new();
                for r in &pair.references {
                    for (gram, cnt) in ngram_counts(r, n) {
                        let e = merged.entry(gram).or_insert(0);
                        *e = (*e).max(cnt);
                    }
                }
                merged
            })
            .collect();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            totals[n - 1] += hc.values().sum::<usize>();
            for (gram, cnt) in hc {
                let limit = ref_counts[n - 1].get(gram).copied().unwrap_or(0);
                clipped[n - 1] += cnt.min(limit);
            }
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if totals[n] == 0 {
            SMOOTH_EPS
        } else {
            let m = if clipped[n] == 0 { SMOOTH_EPS } else { clipped[n] as f64 };
            m / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let geo = (log_sum / max_n as f64).exp();
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    bp * geo
}
