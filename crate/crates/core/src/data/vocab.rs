use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::Document;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const N_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Word-level vocabulary with the special tokens fixed at ids `0..5`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub fn normalize_text(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Token types with frequency `>= min_freq`, ordered by frequency (desc)
/// then lexicographically, after the specials.
pub fn build_vocab(corpus: &[Document], min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Contract("build_vocab needs a nonempty corpus".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus {
        for tok in &doc.tokens {
            for word in tok.text.split_whitespace() {
                *counts.entry(normalize_text(word)).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&w.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(w, _)| w)))
}

impl Vocab {
    /// Builds from an ordered token list that must start with the specials.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < N_SPECIAL || tokens[..N_SPECIAL].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(alloc::format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a token text, `UNK` when absent.
    pub fn id(&self, text: &str) -> usize {
        self.index.get(&normalize_text(text)).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIAL
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Token;
    use alloc::vec;

    fn doc(words: &[&str]) -> Document {
        Document {
            id: "d".into(),
            page_width: 10,
            page_height: 10,
            tokens: words
                .iter()
                .map(|w| Token { text: w.to_string(), bbox: [0, 0, 1, 1] })
                .collect(),
            labels: None,
        }
    }

    #[test]
    fn hand_counted_vocab() {
        let v = build_vocab(&[doc(&["the", "The", "a", "THE"])], 2).unwrap();
        assert_eq!(v.len(), N_SPECIAL + 1);
        assert_eq!(v.token(N_SPECIAL), Some("the"));
        assert_eq!(v.id("a"), UNK);
        assert_eq!(v.id("The"), N_SPECIAL);
    }

    #[test]
    fn min_freq_above_all_counts_gives_specials_only() {
        let v = build_vocab(&[doc(&["x", "y"])], 5).unwrap();
        assert_eq!(v.tokens(), &SPECIAL_TOKENS.map(String::from));
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let corpus = [doc(&["b", "c", "a", "c", "b"])];
        let v = build_vocab(&corpus, 1).unwrap();
        assert_eq!(&v.tokens()[N_SPECIAL..], &["b", "c", "a"]);
        assert_eq!(build_vocab(&corpus, 1).unwrap(), v);
    }

    #[test]
    fn from_tokens_requires_specials() {
        assert!(Vocab::from_tokens(vec!["x".to_string()]).is_err());
        assert!(build_vocab(&[], 1).is_err());
    }
}
