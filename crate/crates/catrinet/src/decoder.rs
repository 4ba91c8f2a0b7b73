//! Report decoder: a one-layer causal text transformer producing per-step
//! text context, a context-encoding LSTM over the attended image features,
//! two stacked generation LSTMs each with a vocabulary head, and a label
//! LSTM over the report for multi-label tag prediction.
//!
//! In single-stage mode (the decoder ablation) only the first generation
//! LSTM exists and it consumes the attention output directly.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, LstmCell};
use crate::tensor::{Bound, Graph, ParamStore, TensorRef};
use crate::vocab::UNK;

/// Binary tag annotation of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVector(pub Vec<u8>);

impl TagVector {
    pub fn validate(&self, expected_len: usize) -> Result<()> {
        if self.0.len() != expected_len {
            return Err(Error::Validation(format!(
                "tag vector length {} (expected {expected_len})",
                self.0.len()
            )));
        }
        if self.0.iter().any(|&t| t > 1) {
            return Err(Error::Validation("tag entries must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&t| t as f64).collect()
    }
}

/// Hidden/cell state of the three decoder LSTMs at one step.
#[derive(Clone, Copy)]
pub struct DecoderState {
    pub h1: TensorRef,
    pub c1: TensorRef,
    pub h2: TensorRef,
    pub c2: TensorRef,
    pub h3: TensorRef,
    pub c3: TensorRef,
}

pub struct TripleLstmDecoder {
    pub dim: usize,
    pub vocab_size: usize,
    pub tag_count: usize,
    pub max_len: usize,
    /// shared word embedding used by the text transformer, both decode
    /// stages and the label LSTM
    pub embed: String,
    txt_pos: String,
    txt_q: Linear,
    txt_k: Linear,
    txt_v: Linear,
    txt_o: Linear,
    txt_ln1: LayerNorm,
    txt_ffn1: Linear,
    txt_ffn2: Linear,
    txt_ln2: LayerNorm,
    blue: Option<LstmCell>,
    stage1: LstmCell,
    stage2: Option<LstmCell>,
    fc1: Linear,
    fc2: Option<Linear>,
    purple: Option<LstmCell>,
    tag_head: Option<Linear>,
    /// stage-1 only: no blue/stage-2/label path, attention feeds stage 1
    pub single_stage: bool,
}

impl TripleLstmDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        vocab_size: usize,
        tag_count: usize,
        max_len: usize,
        ff_mult: usize,
        single_stage: bool,
    ) -> Self {
        let embed = format!("{prefix}.embed");
        store.insert_uniform(&embed, vocab_size, dim, 0.1, rng);
        let txt_pos = format!("{prefix}.txt.pos");
        store.insert_uniform(&txt_pos, max_len + 2, dim, 0.1, rng);
        let txt_q = Linear::init(store, rng, &format!("{prefix}.txt.wq"), dim, dim);
        let txt_k = Linear::init(store, rng, &format!("{prefix}.txt.wk"), dim, dim);
        let txt_v = Linear::init(store, rng, &format!("{prefix}.txt.wv"), dim, dim);
        let txt_o = Linear::init(store, rng, &format!("{prefix}.txt.wo"), dim, dim);
        let txt_ln1 = LayerNorm::init(store, &format!("{prefix}.txt.ln1"), dim);
        let txt_ffn1 = Linear::init(store, rng, &format!("{prefix}.txt.ffn1"), dim, ff_mult * dim);
        let txt_ffn2 = Linear::init(store, rng, &format!("{prefix}.txt.ffn2"), ff_mult * dim, dim);
        let txt_ln2 = LayerNorm::init(store, &format!("{prefix}.txt.ln2"), dim);
        let (blue, stage2, fc2, purple, tag_head) = if single_stage {
            (None, None, None, None, None)
        } else {
            (
                Some(LstmCell::init(store, rng, &format!("{prefix}.blue"), 2 * dim, dim)),
                Some(LstmCell::init(store, rng, &format!("{prefix}.stage2"), 3 * dim, dim)),
                Some(Linear::init(store, rng, &format!("{prefix}.fc2"), dim, vocab_size)),
                Some(LstmCell::init(store, rng, &format!("{prefix}.purple"), dim, dim)),
                Some(Linear::init(store, rng, &format!("{prefix}.tag"), dim, tag_count)),
            )
        };
        let stage1 = LstmCell::init(store, rng, &format!("{prefix}.stage1"), 3 * dim, dim);
        let fc1 = Linear::init(store, rng, &format!("{prefix}.fc1"), dim, vocab_size);
        TripleLstmDecoder {
            dim,
            vocab_size,
            tag_count,
            max_len,
            embed,
            txt_pos,
            txt_q,
            txt_k,
            txt_v,
            txt_o,
            txt_ln1,
            txt_ffn1,
            txt_ffn2,
            txt_ln2,
            blue,
            stage1,
            stage2,
            fc1,
            fc2,
            purple,
            tag_head,
            single_stage,
        }
    }

    fn sanitize(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&id| if id < self.vocab_size { id } else { UNK }).collect()
    }

    pub fn zero_state(&self, g: &mut Graph) -> DecoderState {
        let mk = |g: &mut Graph, d: usize| {
            let h = g.constant(vec![0.0; d], 1, d);
            let c = g.constant(vec![0.0; d], 1, d);
            (h, c)
        };
        let (h1, c1) = mk(g, self.dim);
        let (h2, c2) = mk(g, self.dim);
        let (h3, c3) = mk(g, self.dim);
        DecoderState { h1, c1, h2, c2, h3, c3 }
    }

    /// Causal one-layer self-attentive encoder over the embedded prefix;
    /// row t only sees rows 0..=t. Unknown ids are substituted with UNK,
    /// never an error.
    pub fn text_transformer(&self, g: &mut Graph, bound: &Bound, prefix_ids: &[usize]) -> TensorRef {
        assert!(!prefix_ids.is_empty(), "text_transformer: empty prefix");
        let ids = self.sanitize(prefix_ids);
        let t = ids.len();
        assert!(
            t <= self.max_len + 2,
            "text_transformer: prefix length {t} exceeds positional table"
        );
        let emb = g.gather_rows(bound.id(&self.embed), &ids);
        let pos_ids: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(bound.id(&self.txt_pos), &pos_ids);
        let x = g.add(emb, pos);
        let q = self.txt_q.forward(g, bound, x);
        let k = self.txt_k.forward(g, bound, x);
        let v = self.txt_v.forward(g, bound, x);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scaled = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        // additive causal mask: large negative above the diagonal
        let mut mask = vec![0.0; t * t];
        for r in 0..t {
            for c in (r + 1)..t {
                mask[r * t + c] = -1e30;
            }
        }
        let mask_node = g.constant(mask, t, t);
        let masked = g.add(scaled, mask_node);
        let attn = g.softmax(masked, 1);
        let ctx = g.matmul(attn, v);
        let out = self.txt_o.forward(g, bound, ctx);
        let res1 = g.add(x, out);
        let n1 = self.txt_ln1.forward(g, bound, res1);
        let f = self.txt_ffn1.forward(g, bound, n1);
        let a = g.gelu(f);
        let f2 = self.txt_ffn2.forward(g, bound, a);
        let res2 = g.add(n1, f2);
        self.txt_ln2.forward(g, bound, res2)
    }

    /// Context-encoding LSTM step over [text context ; attended image
    /// features].
    pub fn encode_context(
        &self,
        g: &mut Graph,
        bound: &Bound,
        t1: TensorRef,
        attended: TensorRef,
        h1: TensorRef,
        c1: TensorRef,
    ) -> (TensorRef, TensorRef) {
        let blue = self.blue.as_ref().expect("encode_context unavailable in single-stage mode");
        let x = g.concat_cols(&[t1, attended]);
        blue.step(g, bound, x, h1, c1)
    }

    /// First generation stage: LSTM over [T1_t ; h1_t ; embed(x_t)]
    /// ([T1_t ; attention ; embed(x_t)] in single-stage mode) with its own
    /// recurrence, then a softmax vocabulary head.
    pub fn decode_stage1(
        &self,
        g: &mut Graph,
        bound: &Bound,
        t1: TensorRef,
        h1_or_att: TensorRef,
        x_t: usize,
        h2: TensorRef,
        c2: TensorRef,
    ) -> (TensorRef, TensorRef, TensorRef) {
        let ids = self.sanitize(&[x_t]);
        let emb = g.gather_rows(bound.id(&self.embed), &ids);
        let x = g.concat_cols(&[t1, h1_or_att, emb]);
        let (h2n, c2n) = self.stage1.step(g, bound, x, h2, c2);
        let logits = self.fc1.forward(g, bound, h2n);
        let dist = g.softmax(logits, 1);
        (h2n, c2n, dist)
    }

    /// Second generation stage: LSTM over [T2_t ; h2_t ; embed(x_t)].
    /// T2_t is the embedding of the stage-1 prediction (argmax at
    /// inference, the gold token under teacher forcing).
    pub fn decode_stage2(
        &self,
        g: &mut Graph,
        bound: &Bound,
        t2_token: usize,
        h2_t: TensorRef,
        x_t: usize,
        h3: TensorRef,
        c3: TensorRef,
    ) -> (TensorRef, TensorRef, TensorRef) {
        let stage2 = self.stage2.as_ref().expect("decode_stage2 unavailable in single-stage mode");
        let fc2 = self.fc2.as_ref().unwrap();
        let ids = self.sanitize(&[t2_token, x_t]);
        let t2 = g.gather_rows(bound.id(&self.embed), &ids[..1]);
        let emb = g.gather_rows(bound.id(&self.embed), &ids[1..]);
        let x = g.concat_cols(&[t2, h2_t, emb]);
        let (h3n, c3n) = stage2.step(g, bound, x, h3, c3);
        let logits = fc2.forward(g, bound, h3n);
        let dist = g.softmax(logits, 1);
        (h3n, c3n, dist)
    }

    /// Label LSTM over the embedded report; returns (logits, probabilities).
    pub fn classify_tags(&self, g: &mut Graph, bound: &Bound, report_ids: &[usize]) -> Result<(TensorRef, TensorRef)> {
        let purple = self.purple.as_ref().expect("classify_tags unavailable in single-stage mode");
        let tag_head = self.tag_head.as_ref().unwrap();
        if report_ids.is_empty() {
            return Err(Error::EmptyInput("classify_tags: empty report".into()));
        }
        let ids = self.sanitize(report_ids);
        let emb = g.gather_rows(bound.id(&self.embed), &ids);
        let (mut h, mut c) = purple.zero_state(g);
        for t in 0..ids.len() {
            let x = g.gather_rows(emb, &[t]);
            let (hn, cn) = purple.step(g, bound, x, h, c);
            h = hn;
            c = cn;
        }
        let logits = tag_head.forward(g, bound, h);
        let probs = g.softmax(logits, 1);
        Ok((logits, probs))
    }
}
