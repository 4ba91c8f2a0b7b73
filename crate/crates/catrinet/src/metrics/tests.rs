use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

fn pair(id: &str, hyp: &str, refs: &[&str]) -> EvalPair {
    EvalPair {
        id: id.to_string(),
        hypothesis: toks(hyp),
        references: refs.iter().map(|r| toks(r)).collect(),
    }
}

// ── independent oracles ──────────────────────────────────────────────
// Written scan-style, sharing no helper with the implementations.

fn scan_count(tokens: &[String], gram: &[String]) -> usize {
    if tokens.len() < gram.len() || gram.is_empty() {
        return 0;
    }
    let mut c = 0;
    for i in 0..=tokens.len() - gram.len() {
        if &tokens[i..i + gram.len()] == gram {
            c += 1;
        }
    }
    c
}

fn oracle_bleu(pairs: &[EvalPair], max_n: usize) -> f64 {
    let mut log_p = 0.0;
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    for p in pairs {
        c_len += p.hypothesis.len();
        let mut best_ref = usize::MAX;
        let mut best_key = (usize::MAX, usize::MAX);
        for r in &p.references {
            let diff = if r.len() > p.hypothesis.len() {
                r.len() - p.hypothesis.len()
            } else {
                p.hypothesis.len() - r.len()
            };
            if (diff, r.len()) < best_key {
                best_key = (diff, r.len());
                best_ref = r.len();
            }
        }
        r_len += best_ref;
    }
    if c_len == 0 {
        return 0.0;
    }
    for n in 1..=max_n {
        let mut matches = 0usize;
        let mut total = 0usize;
        for p in pairs {
            let h = &p.hypothesis;
            if h.len() < n {
                continue;
            }
            total += h.len() - n + 1;
            // first-occurrence positions give the distinct n-grams
            for i in 0..=h.len() - n {
                let gram = &h[i..i + n];
                if scan_count(&h[..i + n - 1.min(i + n)], gram) > 0 {
                    continue; // not first occurrence
                }
                let earlier = (0..i).any(|j| &h[j..j + n] == gram);
                if earlier {
                    continue;
                }
                let hyp_count = scan_count(h, gram);
                let ref_max = p.references.iter().map(|r| scan_count(r, gram)).max().unwrap_or(0);
                matches += hyp_count.min(ref_max);
            }
        }
        let pn = if total == 0 {
            1e-9
        } else if matches == 0 {
            1e-9 / total as f64
        } else {
            matches as f64 / total as f64
        };
        log_p += pn.ln() / max_n as f64;
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}

/// Exponential-time LCS: enumerate every subsequence of `a` by bitmask and
/// test whether it is a subsequence of `b`.
fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "oracle_lcs is exponential");
    let mut best = 0usize;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut bi = 0;
        let mut matched = 0;
        for s in &sub {
            while bi < b.len() && &b[bi] != *s {
                bi += 1;
            }
            if bi == b.len() {
                break;
            }
            matched += 1;
            bi += 1;
        }
        if matched == sub.len() {
            best = sub.len();
        }
    }
    best
}

fn oracle_rouge_l(pairs: &[EvalPair], beta_sq: f64) -> f64 {
    let mut total = 0.0;
    for p in pairs {
        let mut best: f64 = 0.0;
        for r in &p.references {
            let l = oracle_lcs(&p.hypothesis, r) as f64;
            if l > 0.0 {
                let rec = l / r.len() as f64;
                let prec = l / p.hypothesis.len() as f64;
                best = best.max((1.0 + beta_sq) * rec * prec / (rec + beta_sq * prec));
            }
        }
        total += best;
    }
    total / pairs.len() as f64
}

fn oracle_cider(pairs: &[EvalPair], max_n: usize, sigma: f64) -> f64 {
    let n_images = pairs.len() as f64;
    let gram_key = |t: &[String]| t.join("\u{1f}");
    // grams of a sentence with raw counts
    let grams_of = |tokens: &[String], n: usize| -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        if tokens.len() >= n {
            for i in 0..=tokens.len() - n {
                *m.entry(gram_key(&tokens[i..i + n])).or_insert(0.0) += 1.0;
            }
        }
        m
    };
    let mut df: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); max_n];
    for p in pairs {
        for n in 1..=max_n {
            let mut in_this_image: BTreeMap<String, bool> = BTreeMap::new();
            for r in &p.references {
                for (g, _) in grams_of(r, n) {
                    in_this_image.insert(g, true);
                }
            }
            for (g, _) in in_this_image {
                *df[n - 1].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf_of = |n: usize, g: &str| -> f64 {
        let d = df[n - 1].get(g).copied().unwrap_or(0.0);
        (n_images / d.max(1.0)).ln()
    };
    let mut total = 0.0;
    for p in pairs {
        let mut per_pair = 0.0;
        for r in &p.references {
            let dl = p.hypothesis.len() as f64 - r.len() as f64;
            let penalty = (-dl * dl / (2.0 * sigma * sigma)).exp();
            let mut per_ref = 0.0;
            for n in 1..=max_n {
                let hg = grams_of(&p.hypothesis, n);
                let rg = grams_of(r, n);
                let mut dot = 0.0;
                let mut hn = 0.0;
                let mut rn = 0.0;
                for (g, c) in &hg {
                    let w = c * idf_of(n, g);
                    hn += w * w;
                    if let Some(rc) = rg.get(g) {
                        dot += w * rc * idf_of(n, g);
                    }
                }
                for (g, c) in &rg {
                    let w = c * idf_of(n, g);
                    rn += w * w;
                }
                let cosv = if hn.sqrt() < 1e-12 || rn.sqrt() < 1e-12 {
                    0.0
                } else {
                    dot / (hn.sqrt() * rn.sqrt())
                };
                per_ref += 10.0 * penalty * cosv;
            }
            per_pair += per_ref / max_n as f64;
        }
        total += per_pair / p.references.len() as f64;
    }
    total / pairs.len() as f64
}

fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<EvalPair> {
    let alphabet = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let n_pairs = rng.gen_range(3..9);
    (0..n_pairs)
        .map(|i| {
            let hyp_len = rng.gen_range(1..9);
            let hyp: Vec<String> = (0..hyp_len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string())
                .collect();
            let n_refs = rng.gen_range(1..4);
            let refs: Vec<Vec<String>> = (0..n_refs)
                .map(|_| {
                    let rl = rng.gen_range(1..9);
                    (0..rl).map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string()).collect()
                })
                .collect();
            EvalPair {
                id: format!("p{i}"),
                hypothesis: hyp,
                references: refs,
            }
        })
        .collect()
}

// ── BLEU ─────────────────────────────────────────────────────────────

#[test]
fn bleu_identity_corpus_is_one() {
    let pairs = vec![
        pair("a", "the lungs are clear", &["the lungs are clear"]),
        pair("b", "no acute finding is seen", &["no acute finding is seen"]),
    ];
    for n in 1..=4 {
        assert!((bleu(&pairs, n) - 1.0).abs() < 1e-12, "BLEU-{n}");
    }
}

#[test]
fn bleu_clipping_definition() {
    // hyp "a a a a" vs ref "a b c d": clipped unigram precision = 1/4
    let pairs = vec![pair("x", "a a a a", &["a b c d"])];
    assert!((bleu(&pairs, 1) - 0.25).abs() < 1e-12);
}

#[test]
#[should_panic(expected = "empty hypothesis set")]
fn bleu_rejects_empty_corpus() {
    bleu(&[], 4);
}

#[test]
fn bleu_matches_bruteforce_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..50 {
        let corpus = random_corpus(&mut rng);
        for n in 1..=4 {
            let got = bleu(&corpus, n);
            let want = oracle_bleu(&corpus, n);
            assert!(
                (got - want).abs() <= 1e-9,
                "trial {trial} BLEU-{n}: {got} vs oracle {want}"
            );
        }
    }
}

// ── ROUGE-L ──────────────────────────────────────────────────────────

#[test]
fn rouge_identity_is_one() {
    let pairs = vec![pair("a", "b c d e", &["b c d e"])];
    assert!((rouge_l(&pairs, 1.44) - 1.0).abs() < 1e-12);
}

#[test]
fn rouge_symmetric_case_equals_recall() {
    // hyp "c a b", ref "a b c": LCS = 2, R = P = 2/3 so F = 2/3
    let pairs = vec![pair("a", "c a b", &["a b c"])];
    assert!((rouge_l(&pairs, 1.44) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn rouge_zero_lcs_scores_zero() {
    let pairs = vec![pair("a", "x y", &["p q r"])];
    assert_eq!(rouge_l(&pairs, 1.44), 0.0);
}

#[test]
fn rouge_lcs_matches_exponential_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..30 {
        let corpus = random_corpus(&mut rng);
        let got = rouge_l(&corpus, 1.44);
        let want = oracle_rouge_l(&corpus, 1.44);
        assert!((got - want).abs() <= 1e-12, "trial {trial}: {got} vs {want}");
        for p in &corpus {
            for r in &p.references {
                assert_eq!(
                    super::rouge::lcs_len(&p.hypothesis, r),
                    oracle_lcs(&p.hypothesis, r),
                    "LCS mismatch on {:?} vs {:?}",
                    p.hypothesis,
                    r
                );
            }
        }
    }
}

// ── CIDEr ────────────────────────────────────────────────────────────

#[test]
fn cider_single_pair_degenerate_idf_is_zero() {
    let pairs = vec![pair("a", "the scan is normal", &["the scan is normal"])];
    assert_eq!(cider(&pairs, 4, 6.0), 0.0);
}

#[test]
fn cider_disjoint_vocabulary_is_zero() {
    let pairs = vec![
        pair("a", "x y z", &["p q r"]),
        pair("b", "u v w", &["m n o"]),
    ];
    assert_eq!(cider(&pairs, 4, 6.0), 0.0);
}

#[test]
fn cider_matches_bruteforce_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..20 {
        let corpus = random_corpus(&mut rng);
        let got = cider(&corpus, 4, 6.0);
        let want = oracle_cider(&corpus, 4, 6.0);
        assert!((got - want).abs() <= 1e-9, "trial {trial}: {got} vs oracle {want}");
    }
}

#[test]
fn cider_is_nonnegative_and_bleu_rouge_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let corpus = random_corpus(&mut rng);
        for n in 1..=4 {
            let b = bleu(&corpus, n);
            assert!((0.0..=1.0).contains(&b), "BLEU out of range: {b}");
        }
        let r = rouge_l(&corpus, 1.44);
        assert!((0.0..=1.0).contains(&r), "ROUGE out of range: {r}");
        assert!(cider(&corpus, 4, 6.0) >= 0.0);
    }
}

#[test]
fn metrics_are_corpus_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let corpus = random_corpus(&mut rng);
    let mut reversed = corpus.clone();
    reversed.reverse();
    assert!((bleu(&corpus, 4) - bleu(&reversed, 4)).abs() < 1e-12);
    assert!((rouge_l(&corpus, 1.44) - rouge_l(&reversed, 1.44)).abs() < 1e-12);
    assert!((cider(&corpus, 4, 6.0) - cider(&reversed, 4, 6.0)).abs() < 1e-12);
}

// ── head statistics ──────────────────────────────────────────────────

/// Published IU X-ray per-head feature rows: (mean, sd, ci at 0.95).
pub const TABLE1_ROWS: [(f64, f64, f64); 8] = [
    (0.7500, 0.2812, 0.1949),
    (-0.0240, 0.0078, 0.0054),
    (0.0893, 0.0208, 0.0144),
    (0.0686, 0.0201, 0.0140),
    (0.0338, 0.0103, 0.0071),
    (-0.0484, 0.0133, 0.0092),
    (-0.0030, 0.0155, 0.0108),
    (-0.0516, 0.0236, 0.0164),
];

#[test]
fn ci_reproduces_published_head_rows() {
    for (i, (_, sd, ci)) in TABLE1_ROWS.iter().enumerate() {
        let got = ci_halfwidth(*sd, 8, 0.95).unwrap();
        assert!((got - ci).abs() <= 5e-4, "row {}: {got} vs {ci}", i + 1);
    }
}

#[test]
fn constant_samples_have_zero_sd_and_ci() {
    for mode in [SdMode::Population, SdMode::Sample] {
        let s = head_stats(0, &[0.42; 8], 0.95, mode).unwrap();
        assert_eq!(s.sd, 0.0);
        assert_eq!(s.ci_halfwidth, 0.0);
        assert!((s.mean - 0.42).abs() < 1e-15);
    }
}

#[test]
fn head_stats_requires_two_samples() {
    assert!(matches!(
        head_stats(0, &[1.0], 0.95, SdMode::Population),
        Err(crate::Error::InsufficientData(_))
    ));
}

#[test]
fn sample_sd_exceeds_population_sd() {
    let xs = [0.1, 0.3, 0.2, 0.5, 0.25];
    let p = head_stats(0, &xs, 0.95, SdMode::Population).unwrap();
    let s = head_stats(0, &xs, 0.95, SdMode::Sample).unwrap();
    assert!(s.sd > p.sd);
    let n = xs.len() as f64;
    assert!((s.sd - p.sd * (n / (n - 1.0)).sqrt()).abs() < 1e-12);
}

#[test]
fn profile_svg_has_one_bar_pair_per_head() {
    let single = vec![0.1, 0.5, 0.2, 0.2];
    let double = vec![0.1, 0.9, 0.25, 0.2];
    let svg = weight_profile_svg(&single, &double);
    let rects = svg.matches("<rect").count();
    assert_eq!(rects, 2 * single.len());
}

// ── corpus_eval over files ───────────────────────────────────────────

fn write_jsonl(path: &std::path::Path, rows: &[serde_json::Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(path, text).unwrap();
}

#[test]
fn corpus_eval_identity_scores_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.jsonl");
    let refs = dir.path().join("refs.jsonl");
    write_jsonl(
        &hyp,
        &[
            serde_json::json!({"id": "s1", "text": "the lungs are clear ."}),
            serde_json::json!({"id": "s2", "text": "a ring shadow is present ."}),
        ],
    );
    write_jsonl(
        &refs,
        &[
            serde_json::json!({"id": "s1", "refs": ["the lungs are clear ."]}),
            serde_json::json!({"id": "s2", "refs": ["a ring shadow is present ."]}),
        ],
    );
    let report = corpus_eval(&hyp, &refs).unwrap();
    for v in [
        report.scaled.b1,
        report.scaled.b2,
        report.scaled.b3,
        report.scaled.b4,
        report.scaled.rouge_l,
    ] {
        assert!((v - 100.0).abs() < 1e-9, "scaled score {v}");
    }
}

#[test]
fn corpus_eval_lists_offending_ids() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.jsonl");
    let refs = dir.path().join("refs.jsonl");
    write_jsonl(&hyp, &[serde_json::json!({"id": "a", "text": "x"})]);
    write_jsonl(&refs, &[serde_json::json!({"id": "b", "refs": ["x"]})]);
    match corpus_eval(&hyp, &refs) {
        Err(crate::Error::Alignment(msg)) => {
            assert!(msg.contains('a') && msg.contains('b'), "msg: {msg}");
        }
        other => panic!("expected alignment error, got {other:?}"),
    }
}

#[test]
fn corpus_eval_is_row_order_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let hyp1 = dir.path().join("h1.jsonl");
    let hyp2 = dir.path().join("h2.jsonl");
    let refs = dir.path().join("refs.jsonl");
    let a = serde_json::json!({"id": "a", "text": "the lungs are clear"});
    let b = serde_json::json!({"id": "b", "text": "a band projects over the midline"});
    write_jsonl(&hyp1, &[a.clone(), b.clone()]);
    write_jsonl(&hyp2, &[b, a]);
    write_jsonl(
        &refs,
        &[
            serde_json::json!({"id": "a", "refs": ["the lungs are clear today"]}),
            serde_json::json!({"id": "b", "refs": ["a large band projects over the midline"]}),
        ],
    );
    let r1 = corpus_eval(&hyp1, &refs).unwrap();
    let r2 = corpus_eval(&hyp2, &refs).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn tokenizer_lowercases_and_strips_terminal_punctuation() {
    assert_eq!(tokenize("The Lungs  are CLEAR."), toks("the lungs are clear"));
    assert_eq!(tokenize("a , b . ."), toks("a b"));
}
