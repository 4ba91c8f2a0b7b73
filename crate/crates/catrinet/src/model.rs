//! The full model: visual encoder, adaptive cross-attention and the
//! triple-LSTM decoder, wired for teacher-forced training, greedy and
//! beam-search generation, and tag classification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, BatchAvg, CrossAttention, HeadWeightState};
use crate::corpus::Sample;
use crate::decoder::{DecoderState, TripleLstmDecoder};
use crate::encoder::{ImageGrid, VisualEncoder};
use crate::error::{Error, Result};
use crate::loss::{caption_ce, combine, multilabel_soft_margin, LossNodes, LossWeights};
use crate::tensor::{Bound, Graph, ParamStore, TensorRef};
use crate::vocab::{Vocabulary, BOS, EOS};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_eps_recip")]
    pub eps_recip: f64,
}

fn default_dim() -> usize {
    512
}
fn default_heads() -> usize {
    8
}
fn default_patch_size() -> usize {
    8
}
fn default_ff_mult() -> usize {
    4
}
fn default_max_len() -> usize {
    60
}
fn default_eps_recip() -> f64 {
    1e-6
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: default_dim(),
            heads: default_heads(),
            patch_size: default_patch_size(),
            ff_mult: default_ff_mult(),
            max_len: default_max_len(),
            eps_recip: default_eps_recip(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default)]
    pub disable_ca: bool,
    #[serde(default)]
    pub disable_tl: bool,
}

/// Everything a finished forward pass exposes to the trainer.
pub struct TrainForward {
    pub graph: Graph,
    pub bound: Bound,
    pub nodes: LossNodes,
    /// per sample, per head: pooled (query-time-averaged) head outputs,
    /// detached for the next iteration's cosine weights
    pub pooled: Vec<Vec<Vec<f64>>>,
}

/// One generated report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenOutput {
    pub tokens: Vec<usize>,
    pub text: String,
    /// length-normalized log-probability of the emitted sequence
    pub logprob: f64,
    pub label_probs: Vec<f64>,
}

pub struct CaTriNet {
    pub cfg: ModelConfig,
    pub flags: AblationFlags,
    pub batch_avg: BatchAvg,
    pub vocab: Vocabulary,
    pub tag_count: usize,
    pub image_size: usize,
    pub store: ParamStore,
    pub encoder: VisualEncoder,
    pub cross: CrossAttention,
    pub decoder: TripleLstmDecoder,
    /// double-weighting state carried across training iterations and into
    /// checkpoints for inference
    pub head_state: HeadWeightState,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl CaTriNet {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        cfg: ModelConfig,
        flags: AblationFlags,
        batch_avg: BatchAvg,
        vocab: Vocabulary,
        tag_count: usize,
        image_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let attn_cfg = AttentionConfig {
            num_heads: cfg.heads,
            model_dim: cfg.dim,
            eps_recip: cfg.eps_recip,
            batch_avg,
        };
        attn_cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = VisualEncoder::init(
            &mut store,
            &mut rng,
            "enc",
            &attn_cfg,
            cfg.patch_size,
            (image_size, image_size),
            cfg.ff_mult,
        )?;
        let cross = CrossAttention::init(&mut store, &mut rng, "att", attn_cfg);
        let decoder = TripleLstmDecoder::init(
            &mut store,
            &mut rng,
            "dec",
            cfg.dim,
            vocab.len(),
            tag_count,
            cfg.max_len,
            cfg.ff_mult,
            flags.disable_tl,
        );
        let head_state = HeadWeightState::initial(cfg.heads);
        Ok(CaTriNet {
            cfg,
            flags,
            batch_avg,
            vocab,
            tag_count,
            image_size,
            store,
            encoder,
            cross,
            decoder,
            head_state,
        })
    }

    pub fn attn_config(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.cfg.heads,
            model_dim: self.cfg.dim,
            eps_recip: self.cfg.eps_recip,
            batch_avg: self.batch_avg,
        }
    }

    /// Secondary weights in effect (zero when co-attention is disabled).
    pub fn effective_w_dwa(&self) -> Vec<f64> {
        if self.flags.disable_ca {
            vec![0.0; self.cfg.heads]
        } else {
            self.head_state.w_dwa.clone()
        }
    }

    /// BOS + content + EOS, truncated to the decoder's window.
    fn framed_report(&self, report: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode_framed(report);
        if ids.len() > self.cfg.max_len + 2 {
            ids.truncate(self.cfg.max_len + 1);
            ids.push(EOS);
        }
        ids
    }

    /// Keys/values context: the bag-of-word feature prepended to the
    /// projected patch features.
    fn build_context(&self, g: &mut Graph, bound: &Bound, img: &ImageGrid) -> crate::attention::SampleContext {
        let enc = self.encoder.encode(g, bound, img, None);
        let ctx_rows = g.concat_rows(&[enc.f_cl, enc.f_embedding]);
        self.cross.prepare_context(g, bound, ctx_rows)
    }

    /// Teacher-forced forward over a batch. `w_dwa` is the detached
    /// secondary weighting applied this iteration; `step_limit` optionally
    /// truncates every sample to its first n decode steps.
    pub fn forward_train(
        &self,
        store: &ParamStore,
        batch: &[&Sample],
        weights: &LossWeights,
        w_dwa: &[f64],
        step_limit: Option<usize>,
    ) -> TrainForward {
        assert!(!batch.is_empty(), "forward_train: empty batch");
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store);
        let w_a_node = self.cross.w_a_node(&mut g, &bound);
        let n = self.cfg.heads;
        let dh = self.cfg.dim / n;
        let mut pooled = Vec::with_capacity(batch.len());
        let mut loss1_terms = Vec::with_capacity(batch.len());
        let mut loss2_terms = Vec::with_capacity(batch.len());
        let mut losst_terms = Vec::with_capacity(batch.len());
        for sample in batch {
            let ctx = self.build_context(&mut g, &bound, &sample.image);
            let gold = self.framed_report(&sample.report);
            let steps = step_limit
                .map(|l| l.min(gold.len() - 1))
                .unwrap_or(gold.len() - 1);
            let prefix = &gold[..steps];
            let t1_all = self.decoder.text_transformer(&mut g, &bound, prefix);
            let mut st = self.decoder.zero_state(&mut g);
            let mut dists1 = Vec::with_capacity(steps);
            let mut dists2 = Vec::with_capacity(steps);
            let mut head_sums: Vec<Vec<f64>> = vec![vec![0.0; dh]; n];
            for t in 0..steps {
                let t1 = g.gather_rows(t1_all, &[t]);
                let att = self.cross.forward(&mut g, &bound, t1, &ctx, w_a_node, w_dwa);
                for (j, head) in att.per_head.iter().enumerate() {
                    for (acc, v) in head_sums[j].iter_mut().zip(g.value(*head)) {
                        *acc += v;
                    }
                }
                if self.flags.disable_tl {
                    let (h2, c2, dist1) =
                        self.decoder
                            .decode_stage1(&mut g, &bound, t1, att.combined, gold[t], st.h2, st.c2);
                    st.h2 = h2;
                    st.c2 = c2;
                    dists1.push(dist1);
                } else {
                    let (h1, c1) = self
                        .decoder
                        .encode_context(&mut g, &bound, t1, att.combined, st.h1, st.c1);
                    let (h2, c2, dist1) = self.decoder.decode_stage1(&mut g, &bound, t1, h1, gold[t], st.h2, st.c2);
                    let (h3, c3, dist2) =
                        self.decoder
                            .decode_stage2(&mut g, &bound, gold[t + 1], h2, gold[t], st.h3, st.c3);
                    st = DecoderState { h1, c1, h2, c2, h3, c3 };
                    dists1.push(dist1);
                    dists2.push(dist2);
                }
            }
            for sums in head_sums.iter_mut() {
                for v in sums.iter_mut() {
                    *v /= steps as f64;
                }
            }
            pooled.push(head_sums);
            let targets = &gold[1..=steps];
            loss1_terms.push(caption_ce(&mut g, &dists1, targets, None));
            if !self.flags.disable_tl {
                loss2_terms.push(caption_ce(&mut g, &dists2, targets, None));
                // the label path trains on the gold report
                let content = self.vocab.encode(&sample.report);
                let (tag_logits, _) = self
                    .decoder
                    .classify_tags(&mut g, &bound, &content)
                    .expect("gold report is non-empty");
                losst_terms.push(multilabel_soft_margin(&mut g, tag_logits, &sample.tags.as_f64()));
            }
        }
        let inv_b = 1.0 / batch.len() as f64;
        let sum1 = g.add_n(&loss1_terms);
        let loss_1 = g.scale(sum1, inv_b);
        let (loss_t, loss_2) = if self.flags.disable_tl {
            (g.scalar(0.0), g.scalar(0.0))
        } else {
            let sum2 = g.add_n(&loss2_terms);
            let sumt = g.add_n(&losst_terms);
            (g.scale(sumt, inv_b), g.scale(sum2, inv_b))
        };
        let nodes = combine(&mut g, loss_t, loss_1, loss_2, weights);
        TrainForward {
            graph: g,
            bound,
            nodes,
            pooled,
        }
    }

    /// Forward-only total loss, for finite-difference verification.
    pub fn training_loss(
        &self,
        store: &ParamStore,
        batch: &[&Sample],
        weights: &LossWeights,
        w_dwa: &[f64],
        step_limit: Option<usize>,
    ) -> f64 {
        let fwd = self.forward_train(store, batch, weights, w_dwa, step_limit);
        fwd.graph.value(fwd.nodes.total)[0]
    }

    fn label_probs_for(&self, g: &mut Graph, bound: &Bound, tokens: &[usize]) -> Vec<f64> {
        if self.flags.disable_tl {
            return Vec::new();
        }
        // an empty generation still gets a label: classify the terminator
        let ids: Vec<usize> = if tokens.is_empty() { vec![EOS] } else { tokens.to_vec() };
        let (_, probs) = self
            .decoder
            .classify_tags(g, bound, &ids)
            .expect("non-empty ids by construction");
        g.value(probs).to_vec()
    }

    /// Next-token distribution for the current prefix; advances the state.
    fn decode_step(
        &self,
        g: &mut Graph,
        bound: &Bound,
        ctx: &crate::attention::SampleContext,
        w_a_node: TensorRef,
        w_dwa: &[f64],
        prefix: &[usize],
        st: DecoderState,
    ) -> (DecoderState, Vec<f64>) {
        let t1_all = self.decoder.text_transformer(g, bound, prefix);
        let t1 = g.gather_rows(t1_all, &[prefix.len() - 1]);
        let att = self.cross.forward(g, bound, t1, ctx, w_a_node, w_dwa);
        let x_t = *prefix.last().unwrap();
        if self.flags.disable_tl {
            let (h2, c2, dist1) = self.decoder.decode_stage1(g, bound, t1, att.combined, x_t, st.h2, st.c2);
            let dist = g.value(dist1).to_vec();
            (
                DecoderState {
                    h1: st.h1,
                    c1: st.c1,
                    h2,
                    c2,
                    h3: st.h3,
                    c3: st.c3,
                },
                dist,
            )
        } else {
            let (h1, c1) = self.decoder.encode_context(g, bound, t1, att.combined, st.h1, st.c1);
            let (h2, c2, dist1) = self.decoder.decode_stage1(g, bound, t1, h1, x_t, st.h2, st.c2);
            // stage-1 prediction feeds stage 2 at inference
            let s1_tok = argmax(g.value(dist1));
            let (h3, c3, dist2) = self.decoder.decode_stage2(g, bound, s1_tok, h2, x_t, st.h3, st.c3);
            let dist = g.value(dist2).to_vec();
            (DecoderState { h1, c1, h2, c2, h3, c3 }, dist)
        }
    }

    /// Greedy decoding: argmax of the final-stage distribution each step,
    /// until EOS or the length limit.
    pub fn greedy_generate(&self, store: &ParamStore, img: &ImageGrid, max_len: usize) -> GenOutput {
        assert!(max_len >= 1, "greedy_generate: max_len must be >= 1");
        let w_dwa = self.effective_w_dwa();
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store);
        let w_a_node = self.cross.w_a_node(&mut g, &bound);
        let ctx = self.build_context(&mut g, &bound, img);
        let mut prefix = vec![BOS];
        let mut st = self.decoder.zero_state(&mut g);
        let mut tokens = Vec::new();
        let mut logp = 0.0;
        let mut steps = 0usize;
        for _ in 0..max_len.min(self.cfg.max_len) {
            let (new_st, dist) = self.decode_step(&mut g, &bound, &ctx, w_a_node, &w_dwa, &prefix, st);
            st = new_st;
            let tok = argmax(&dist);
            logp += dist[tok].ln();
            steps += 1;
            if tok == EOS {
                break;
            }
            prefix.push(tok);
            tokens.push(tok);
        }
        let label_probs = self.label_probs_for(&mut g, &bound, &tokens);
        let text = self.vocab.decode(&tokens);
        GenOutput {
            tokens,
            text,
            logprob: logp / steps as f64,
            label_probs,
        }
    }

    /// Length-normalized beam search over the final-stage distribution.
    /// Width 1 reproduces greedy decoding exactly.
    pub fn beam_search(&self, store: &ParamStore, img: &ImageGrid, beam_width: usize, max_len: usize) -> GenOutput {
        assert!(beam_width >= 1, "beam_search: width must be >= 1");
        assert!(max_len >= 1, "beam_search: max_len must be >= 1");
        let w_dwa = self.effective_w_dwa();
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store);
        let w_a_node = self.cross.w_a_node(&mut g, &bound);
        let ctx = self.build_context(&mut g, &bound, img);

        struct Beam {
            prefix: Vec<usize>,
            tokens: Vec<usize>,
            logp: f64,
            steps: usize,
            st: DecoderState,
        }
        struct Done {
            tokens: Vec<usize>,
            score: f64,
        }
        let mut active = vec![Beam {
            prefix: vec![BOS],
            tokens: Vec::new(),
            logp: 0.0,
            steps: 0,
            st: self.decoder.zero_state(&mut g),
        }];
        let mut completed: Vec<Done> = Vec::new();
        for _ in 0..max_len.min(self.cfg.max_len) {
            if active.is_empty() {
                break;
            }
            struct Cand {
                logp: f64,
                beam: usize,
                tok: usize,
            }
            let mut states = Vec::with_capacity(active.len());
            let mut cands: Vec<Cand> = Vec::new();
            for (bi, beam) in active.iter().enumerate() {
                let (new_st, dist) =
                    self.decode_step(&mut g, &bound, &ctx, w_a_node, &w_dwa, &beam.prefix, beam.st);
                states.push(new_st);
                for (tok, &p) in dist.iter().enumerate() {
                    cands.push(Cand {
                        logp: beam.logp + p.ln(),
                        beam: bi,
                        tok,
                    });
                }
            }
            cands.sort_by(|a, b| {
                b.logp
                    .partial_cmp(&a.logp)
                    .unwrap()
                    .then(a.beam.cmp(&b.beam))
                    .then(a.tok.cmp(&b.tok))
            });
            let mut next: Vec<Beam> = Vec::with_capacity(beam_width);
            for c in cands.into_iter().take(beam_width) {
                let parent = &active[c.beam];
                let steps = parent.steps + 1;
                if c.tok == EOS {
                    completed.push(Done {
                        tokens: parent.tokens.clone(),
                        score: c.logp / steps as f64,
                    });
                } else {
                    let mut prefix = parent.prefix.clone();
                    prefix.push(c.tok);
                    let mut tokens = parent.tokens.clone();
                    tokens.push(c.tok);
                    next.push(Beam {
                        prefix,
                        tokens,
                        logp: c.logp,
                        steps,
                        st: states[c.beam],
                    });
                }
            }
            // surviving beams are distinct sequences by construction
            debug_assert!(
                (0..next.len()).all(|i| (i + 1..next.len()).all(|j| next[i].prefix != next[j].prefix)),
                "duplicate beams"
            );
            active = next;
        }
        for beam in active {
            if beam.steps > 0 {
                completed.push(Done {
                    tokens: beam.tokens,
                    score: beam.logp / beam.steps as f64,
                });
            }
        }
        let best = completed
            .into_iter()
            .reduce(|best, c| if c.score > best.score { c } else { best })
            .expect("at least one hypothesis");
        let label_probs = self.label_probs_for(&mut g, &bound, &best.tokens);
        let text = self.vocab.decode(&best.tokens);
        GenOutput {
            tokens: best.tokens,
            text,
            logprob: best.score,
            label_probs,
        }
    }

    /// Tag probabilities for a report (inference-mode label routing).
    pub fn classify_report(&self, store: &ParamStore, report_ids: &[usize]) -> Result<Vec<f64>> {
        if self.flags.disable_tl {
            return Err(Error::Config("label head disabled in single-stage mode".into()));
        }
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store);
        let (_, probs) = self.decoder.classify_tags(&mut g, &bound, report_ids)?;
        Ok(g.value(probs).to_vec())
    }

    /// Tag logits for a report, thresholded at 0 into a binary vector.
    pub fn predict_tags(&self, store: &ParamStore, report_ids: &[usize]) -> Result<Vec<u8>> {
        if self.flags.disable_tl {
            return Err(Error::Config("label head disabled in single-stage mode".into()));
        }
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store);
        let (logits, _) = self.decoder.classify_tags(&mut g, &bound, report_ids)?;
        Ok(g.value(logits).iter().map(|&v| u8::from(v > 0.0)).collect())
    }
}

// ── checkpoint glue ──────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    model: ModelConfig,
    flags: AblationFlags,
    batch_avg: BatchAvg,
    vocab: Vec<String>,
    tag_count: usize,
    image_size: usize,
    head_state: HeadWeightState,
}

impl CaTriNet {
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let mut head_state = self.head_state.clone();
        head_state.per_sample_cos = Vec::new();
        let meta = CkptMeta {
            model: self.cfg,
            flags: self.flags,
            batch_avg: self.batch_avg,
            vocab: self.vocab.tokens().to_vec(),
            tag_count: self.tag_count,
            image_size: self.image_size,
            head_state,
        };
        crate::tensor::save_checkpoint(path, &self.store, serde_json::to_value(meta)?)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let (store, meta_value) = crate::tensor::load_checkpoint(path)?;
        let meta: CkptMeta = serde_json::from_value(meta_value)
            .map_err(|e| Error::Incompatible(format!("{}: bad metadata: {e}", path.display())))?;
        let vocab = Vocabulary::from_tokens(meta.vocab);
        let mut model = CaTriNet::init(
            meta.model,
            meta.flags,
            meta.batch_avg,
            vocab,
            meta.tag_count,
            meta.image_size,
            0,
        )?;
        // checkpointed parameters must cover exactly the rebuilt layout
        let expected: Vec<&String> = model.store.names().collect();
        let got: Vec<&String> = store.names().collect();
        if expected != got {
            return Err(Error::Incompatible(format!(
                "{}: parameter set mismatch (vocabulary or architecture changed)",
                path.display()
            )));
        }
        for (name, p) in model.store.iter() {
            let l = store.get(name);
            if (l.rows, l.cols) != (p.rows, p.cols) {
                return Err(Error::Incompatible(format!(
                    "{}: shape mismatch for {name}",
                    path.display()
                )));
            }
        }
        model.store = store;
        model.head_state = meta.head_state;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
