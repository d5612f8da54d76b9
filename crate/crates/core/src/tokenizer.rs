//! Lowercased whitespace tokenizer with a frequency-ranked vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
const RESERVED: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    // id - 2 -> token; reserved ids are implicit
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

fn words(query: &str) -> impl Iterator<Item = String> + '_ {
    query.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    /// Ranks lowercased tokens by descending frequency, breaking ties
    /// lexicographically, and keeps at most `max_size - 2` of them.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        if max_size < RESERVED {
            return Err(Error::Config(format!("vocab max_size {max_size} leaves no room for PAD/UNK")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for q in corpus {
            for w in words(q.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED);
        Ok(Self::from_tokens(ranked.into_iter().map(|(w, _)| w).collect()))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + RESERVED) as u32))
            .collect();
        Vocab { tokens, index }
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD => Some(PAD_TOKEN),
            UNK => Some(UNK_TOKEN),
            _ => self.tokens.get(id as usize - RESERVED).map(String::as_str),
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// One token per line; line `n` (from 0) holds id `n + 2`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocab entry {t:?}")));
            }
            if !seen.insert(t) {
                return Err(Error::Data(format!("duplicate vocab entry {t:?}")));
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_text(&text)
    }
}

/// Fixed-length token ids for one query. The mask is a run of `true`
/// followed by `false`; padded slots hold [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    /// Token count before truncation.
    pub original_length: usize,
}

impl TokenSequence {
    /// Number of real (unpadded) positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.original_length == 0
    }

    pub fn truncated(&self) -> bool {
        self.original_length > self.ids.len()
    }
}

pub fn encode(query: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 1, "sequence length must be at least 1");
    let all: Vec<u32> = words(query).map(|w| vocab.id(&w)).collect();
    let real = all.len().min(max_len);
    let mut ids = vec![PAD; max_len];
    ids[..real].copy_from_slice(&all[..real]);
    let mut mask = vec![false; max_len];
    mask[..real].iter_mut().for_each(|m| *m = true);
    TokenSequence {
        ids,
        mask,
        original_length: all.len(),
    }
}

/// Token strings for the unpadded positions; unknown ids decode to `[UNK]`.
pub fn decode(seq: &TokenSequence, vocab: &Vocab) -> Vec<String> {
    seq.ids
        .iter()
        .zip(&seq.mask)
        .filter(|(_, &m)| m)
        .map(|(&id, _)| vocab.token(id).unwrap_or(UNK_TOKEN).to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn covid() -> Vocab {
        Vocab::build(&["covid vaccine", "covid shot"], 100).unwrap()
    }

    #[test]
    fn frequency_then_lexicographic() {
        let v = covid();
        assert_eq!(v.id("covid"), 2);
        assert_eq!(v.id("shot"), 3);
        assert_eq!(v.id("vaccine"), 4);
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(0), Some(PAD_TOKEN));
        assert_eq!(v.token(1), Some(UNK_TOKEN));
    }

    #[test]
    fn truncates_to_most_frequent() {
        let v = Vocab::build(&["covid vaccine", "covid shot"], 3).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v.contains("covid") && !v.contains("shot"));
        assert_eq!(Vocab::build(&["covid vaccine", "covid shot"], 100).unwrap(), covid());
    }

    #[test]
    fn build_errors() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocab::build(&empty, 10), Err(Error::Data(_))));
        assert!(Vocab::build(&["a"], 1).is_err());
    }

    #[test]
    fn encode_examples() {
        let v = covid();
        let s = encode("covid vaccine", &v, 4);
        assert_eq!(s.ids, vec![2, 4, 0, 0]);
        assert_eq!(s.mask, vec![true, true, false, false]);

        let e = encode("", &v, 4);
        assert_eq!(e.ids, vec![PAD; 4]);
        assert_eq!(e.original_length, 0);
        assert!(e.is_empty());

        let long: Vec<String> = (0..40).map(|i| if i % 2 == 0 { "covid" } else { "shot" }.to_string()).collect();
        let s = encode(&long.join(" "), &v, 32);
        assert_eq!(s.real_len(), 32);
        assert_eq!(s.original_length, 40);
        assert!(s.truncated());
        assert_eq!(&s.ids[..4], &[2, 3, 2, 3]);

        assert_eq!(encode("COVID booster", &v, 3).ids, vec![2, UNK, PAD]);
    }

    #[test]
    fn text_round_trip() {
        let v = covid();
        assert_eq!(v.to_text(), "covid\nshot\nvaccine\n");
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("a\na\n").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_properties(words in prop::collection::vec("[a-dA-D]{1,3}", 0..12), len in 1usize..10) {
            let corpus = ["a b c", "aa bb", "ab ba dd"];
            let v = Vocab::build(&corpus, 50).unwrap();
            let q = words.join(" ");
            let s = encode(&q, &v, len);
            prop_assert_eq!(&s, &encode(&q, &v, len));
            prop_assert_eq!(s.mask.iter().filter(|&&m| m).count(), words.len().min(len));
            prop_assert!(s.ids.iter().all(|&id| (id as usize) < v.len()));
            let decoded = decode(&s, &v);
            for (d, w) in decoded.iter().zip(words.iter().map(|w| w.to_lowercase())) {
                if v.contains(&w) {
                    prop_assert_eq!(d, &w);
                } else {
                    prop_assert_eq!(d.as_str(), UNK_TOKEN);
                }
            }
        }
    }
}
