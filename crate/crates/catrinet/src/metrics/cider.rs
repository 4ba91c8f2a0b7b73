//! CIDEr: TF-IDF n-gram cosine consensus, averaged over n = 1..max_n,
//! with a gaussian length penalty and x10 scaling. IDF is computed over
//! the reference sets of the whole corpus; single-image corpora are
//! permitted and degenerate to 0 (every IDF is log(1/1) = 0).

use std::collections::{HashMap, HashSet};

use super::EvalPair;

type Gram<'a> = &'a [String];

fn gram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<Gram<'a>, f64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0.0) += 1.0;
        }
    }
    counts
}

fn tfidf_cosine(hyp: &HashMap<Gram, f64>, rf: &HashMap<Gram, f64>, idf: &HashMap<Gram, f64>, n_images: f64) -> f64 {
    let weight = |gram: Gram| idf.get(gram).copied().unwrap_or_else(|| n_images.ln());
    let mut dot = 0.0;
    for (gram, hc) in hyp {
        if let Some(rc) = rf.get(gram) {
            let w = weight(gram);
            dot += hc * rc * w * w;
        }
    }
    let hnorm: f64 = hyp.iter().map(|(g, c)| (c * weight(g)).powi(2)).sum::<f64>().sqrt();
    let rnorm: f64 = rf.iter().map(|(g, c)| (c * weight(g)).powi(2)).sum::<f64>().sqrt();
    if hnorm < 1e-12 || rnorm < 1e-12 {
        0.0
    } else {
        dot / (hnorm * rnorm)
    }
}

pub fn cider(pairs: &[EvalPair], max_n: usize, sigma: f64) -> f64 {
    assert!(!pairs.is_empty(), "cider: empty corpus");
    let n_images = pairs.len() as f64;
    // document frequency per n-gram: number of images whose reference set
    // contains it at least once
    let mut df: Vec<HashMap<Gram, f64>> = vec![HashMap::new(); max_n];
    for pair in pairs {
        for n in 1..=max_n {
            let mut seen: HashSet<Gram> = HashSet::new();
            for r in &pair.references {
                if r.len() >= n {
                    for w in r.windows(n) {
                        seen.insert(w);
                    }
                }
            }
            for gram in seen {
                *df[n - 1].entry(gram).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf: Vec<HashMap<Gram, f64>> = df
        .iter()
        .map(|m| {
            m.iter()
                .map(|(&g, &d)| (g, (n_images / d.max(1.0)).ln()))
                .collect()
        })
        .collect();

    let mut corpus_sum = 0.0;
    for pair in pairs {
        let hyp_grams: Vec<HashMap<Gram, f64>> = (1..=max_n).map(|n| gram_counts(&pair.hypothesis, n)).collect();
        let mut pair_sum = 0.0;
        for r in &pair.references {
            let penalty = {
                let dl = pair.hypothesis.len() as f64 - r.len() as f64;
                (-dl * dl / (2.0 * sigma * sigma)).exp()
            };
            let mut ref_sum = 0.0;
            for n in 1..=max_n {
                let rg = gram_counts(r, n);
                ref_sum += 10.0 * penalty * tfidf_cosine(&hyp_grams[n - 1], &rg, &idf[n - 1], n_images);
            }
            pair_sum += ref_sum / max_n as f64;
        }
        corpus_sum += pair_sum / pair.references.len() as f64;
    }
    corpus_sum / pairs.len() as f64
}
