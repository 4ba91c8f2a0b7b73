//! Token vocabulary with reserved specials at the first four ids.

use std::collections::{BTreeMap, HashMap};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Report tokenization for the model side: plain whitespace split (reports
/// are generated lowercase; punctuation stays as its own token when
/// written that way).
pub fn report_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_string()).collect()
}

impl Vocabulary {
    /// Dense ids: specials at 0..=3, then tokens ordered by descending
    /// frequency, ties broken lexicographically. Tokens below `min_count`
    /// are dropped and map to UNK at encode time.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(reports: I, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for report in reports {
            for tok in report_tokens(report) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        assert!(
            tokens.len() >= SPECIALS.len() && tokens[..4].iter().map(String::as_str).eq(SPECIALS),
            "vocabulary must start with the reserved specials"
        );
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Content token ids (no BOS/EOS framing); unknown tokens become UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        report_tokens(text).iter().map(|t| self.id_of(t)).collect()
    }

    /// BOS + content + EOS, the teacher-forcing frame.
    pub fn encode_framed(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Joins non-special tokens; UNK renders as its surface form.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id))
            .collect();
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_reports_collapse_to_one_set_of_tokens() {
        let v = Vocabulary::build(["the lungs are clear .", "the lungs are clear ."], 1);
        // specials + 5 unique tokens
        assert_eq!(v.len(), 4 + 5);
    }

    #[test]
    fn below_min_count_maps_to_unk() {
        let v = Vocabulary::build(["a a b"], 2);
        assert_eq!(v.id_of("a"), 4);
        assert_eq!(v.id_of("b"), UNK);
        assert_eq!(v.encode("a b"), vec![4, UNK]);
    }

    #[test]
    fn encode_decode_roundtrip_for_in_vocab_text() {
        let text = "no acute abnormality is seen .";
        let v = Vocabulary::build([text, "the heart size is normal ."], 1);
        let ids = v.encode(text);
        assert_eq!(v.decode(&ids), text);
        let framed = v.encode_framed(text);
        assert_eq!(framed[0], BOS);
        assert_eq!(*framed.last().unwrap(), EOS);
        assert_eq!(v.decode(&framed), text);
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let v = Vocabulary::build(["b b c a a a", "c"], 1);
        // a(3) first, then b(2) and c(2) tie -> lexicographic
        assert_eq!(v.token(4), "a");
        assert_eq!(v.token(5), "b");
        assert_eq!(v.token(6), "c");
    }
}
