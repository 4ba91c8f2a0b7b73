use super::*;
use crate::corpus::{generate, CorpusSpec};
use crate::gradcheck::{check_store_gradients, GradTolerance};
use crate::loss::LossWeights;

fn tiny_corpus(seed: u64, n: usize) -> Vec<Sample> {
    let spec = CorpusSpec {
        num_samples: n,
        abnormal_fraction: 0.5,
        tag_classes: 6,
        image_size: 8,
        noise: 0.02,
        seed,
        split: [0.7, 0.1, 0.2],
        templates: None,
    };
    generate(&spec).unwrap()
}

fn tiny_model(samples: &[Sample], flags: AblationFlags, seed: u64) -> CaTriNet {
    let vocab = Vocabulary::build(samples.iter().map(|s| s.report.as_str()), 1);
    let cfg = ModelConfig {
        dim: 8,
        heads: 2,
        patch_size: 4,
        ff_mult: 2,
        max_len: 12,
        eps_recip: 1e-6,
    };
    CaTriNet::init(cfg, flags, BatchAvg::PaperLiteral, vocab, 6, 8, seed).unwrap()
}

#[test]
fn forward_train_is_bit_deterministic() {
    let samples = tiny_corpus(1, 4);
    let model = tiny_model(&samples, AblationFlags::default(), 7);
    let batch: Vec<&Sample> = samples.iter().collect();
    let w = LossWeights::default();
    let dwa = vec![0.1, 0.0];
    let a = model.training_loss(&model.store, &batch, &w, &dwa, None);
    let b = model.training_loss(&model.store, &batch, &w, &dwa, None);
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    // 2 samples, 5 decode steps, every parameter coordinate
    let samples = tiny_corpus(2, 8);
    let model = tiny_model(&samples, AblationFlags::default(), 8);
    let batch: Vec<&Sample> = samples.iter().take(2).collect();
    let w = LossWeights::default();
    let dwa = vec![0.2, 0.05];
    let mut fwd = model.forward_train(&model.store, &batch, &w, &dwa, Some(5));
    fwd.graph.backward(fwd.nodes.total);
    let grads: std::collections::BTreeMap<String, Vec<f64>> = fwd
        .bound
        .iter()
        .map(|(n, t)| {
            let len = model.store.get(n).data.len();
            (
                n.clone(),
                fwd.graph.grad(*t).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; len]),
            )
        })
        .collect();
    check_store_gradients(
        &model.store,
        &|n| grads[n].clone(),
        |s| model.training_loss(s, &batch, &w, &dwa, Some(5)),
        GradTolerance::new(1e-4, 1e-8),
    )
    .unwrap_or_else(|m| panic!("{m:?}"));
}

#[test]
fn every_parameter_reaches_the_loss() {
    // no dead branches: every parameter (encoder included) must receive a
    // nonzero gradient on at least one synthetic batch
    let samples = tiny_corpus(3, 8);
    let model = tiny_model(&samples, AblationFlags::default(), 9);
    let batch: Vec<&Sample> = samples.iter().collect();
    let w = LossWeights::default();
    let dwa = vec![0.3, 0.0];
    let mut fwd = model.forward_train(&model.store, &batch, &w, &dwa, None);
    fwd.graph.backward(fwd.nodes.total);
    for (name, t) in fwd.bound.iter() {
        let grad = fwd.graph.grad(*t);
        let nonzero = grad.map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false);
        assert!(nonzero, "parameter {name} received no gradient");
    }
}

#[test]
fn greedy_terminates_and_emits_valid_ids() {
    let samples = tiny_corpus(4, 4);
    let model = tiny_model(&samples, AblationFlags::default(), 10);
    let out = model.greedy_generate(&model.store, &samples[0].image, 12);
    assert!(out.tokens.len() <= 12);
    assert!(out.tokens.iter().all(|&t| t < model.vocab.len()));
    assert!(out.logprob.is_finite() && out.logprob <= 0.0);
    assert_eq!(out.label_probs.len(), 6);
    // deterministic under fixed parameters
    let again = model.greedy_generate(&model.store, &samples[0].image, 12);
    assert_eq!(out.tokens, again.tokens);
    assert_eq!(out.logprob.to_bits(), again.logprob.to_bits());
}

#[test]
fn beam_width_one_equals_greedy_over_many_inits() {
    let samples = tiny_corpus(5, 2);
    for seed in 0..50 {
        let model = tiny_model(&samples, AblationFlags::default(), 100 + seed);
        let greedy = model.greedy_generate(&model.store, &samples[0].image, 10);
        let beam = model.beam_search(&model.store, &samples[0].image, 1, 10);
        assert_eq!(greedy.tokens, beam.tokens, "seed {seed}");
        assert!(
            (greedy.logprob - beam.logprob).abs() < 1e-12,
            "seed {seed}: {} vs {}",
            greedy.logprob,
            beam.logprob
        );
    }
}

#[test]
fn wider_beam_never_scores_below_greedy() {
    let samples = tiny_corpus(6, 2);
    for seed in [3, 17, 29, 42, 77] {
        let model = tiny_model(&samples, AblationFlags::default(), seed);
        let greedy = model.greedy_generate(&model.store, &samples[1].image, 8);
        let beam = model.beam_search(&model.store, &samples[1].image, 3, 8);
        assert!(
            beam.logprob >= greedy.logprob - 1e-12,
            "seed {seed}: beam {} < greedy {}",
            beam.logprob,
            greedy.logprob
        );
    }
}

#[test]
fn single_stage_mode_generates_without_label_head() {
    let samples = tiny_corpus(7, 2);
    let flags = AblationFlags {
        disable_ca: false,
        disable_tl: true,
    };
    let model = tiny_model(&samples, flags, 11);
    let out = model.greedy_generate(&model.store, &samples[0].image, 10);
    assert!(out.label_probs.is_empty());
    assert!(model.classify_report(&model.store, &[4, 5]).is_err());
}

#[test]
fn disable_ca_uses_zero_secondary_weights() {
    let samples = tiny_corpus(8, 2);
    let flags = AblationFlags {
        disable_ca: true,
        disable_tl: false,
    };
    let mut model = tiny_model(&samples, flags, 12);
    model.head_state.w_dwa = vec![0.7, 0.4]; // must be ignored
    assert_eq!(model.effective_w_dwa(), vec![0.0, 0.0]);
}

#[test]
fn checkpoint_roundtrip_restores_everything() {
    let samples = tiny_corpus(9, 4);
    let mut model = tiny_model(&samples, AblationFlags::default(), 13);
    model.head_state.w_dwa = vec![0.25, 0.0];
    model.head_state.lambda = 0.4;
    model.head_state.w_cos = vec![0.15, 0.4];
    model.head_state.iteration = 9;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save_checkpoint(&path).unwrap();
    let loaded = CaTriNet::load_checkpoint(&path).unwrap();
    assert_eq!(loaded.vocab.tokens(), model.vocab.tokens());
    assert_eq!(loaded.head_state.w_dwa, model.head_state.w_dwa);
    assert_eq!(loaded.head_state.iteration, 9);
    for (name, p) in model.store.iter() {
        assert_eq!(loaded.store.get(name).data, p.data, "param {name}");
    }
    // generation parity after reload
    let a = model.greedy_generate(&model.store, &samples[0].image, 10);
    let b = loaded.greedy_generate(&loaded.store, &samples[0].image, 10);
    assert_eq!(a.tokens, b.tokens);
}

#[test]
fn checkpoint_with_different_vocab_is_incompatible() {
    let samples = tiny_corpus(10, 4);
    let model = tiny_model(&samples, AblationFlags::default(), 14);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save_checkpoint(&path).unwrap();
    // tamper: rewrite metadata with a truncated vocabulary
    let (store, mut meta) = crate::tensor::load_checkpoint(&path).unwrap();
    let vocab: Vec<String> = meta["vocab"]
        .as_array()
        .unwrap()
        .iter()
        .take(8)
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    meta["vocab"] = serde_json::json!(vocab);
    crate::tensor::save_checkpoint(&path, &store, meta).unwrap();
    assert!(matches!(
        CaTriNet::load_checkpoint(&path),
        Err(crate::Error::Incompatible(_))
    ));
}

#[test]
fn predicted_tags_threshold_logits() {
    let samples = tiny_corpus(11, 4);
    let model = tiny_model(&samples, AblationFlags::default(), 15);
    let ids = model.vocab.encode(&samples[0].report);
    let tags = model.predict_tags(&model.store, &ids).unwrap();
    assert_eq!(tags.len(), 6);
    assert!(tags.iter().all(|&t| t <= 1));
}
