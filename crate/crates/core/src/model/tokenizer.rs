use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tagger::tokenize;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Word-level tokenizer over a corpus-built vocabulary. Uses the same word
/// splitting as the tagger; unknown words map to `[UNK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl TextTokenizer {
    /// Vocabulary = specials followed by every distinct word of `texts`,
    /// most frequent first (ties alphabetical), capped at `max_size` total.
    pub fn build<S: AsRef<str>>(texts: &[S], max_size: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for tok in tokenize(t.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(SPECIALS.len());
        let vocab = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().take(room).map(|(w, _)| w))
            .collect();
        Self::from_vocab(vocab).expect("built vocabulary is valid")
    }

    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < SPECIALS.len() || vocab[..SPECIALS.len()] != SPECIALS {
            return Err(Error::invalid("vocabulary must start with [PAD] [UNK] [CLS]"));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// `[CLS]` followed by at most `max_len` word ids.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<usize> {
        if tokens.len() > max_len {
            log::debug!("truncating text from {} to {max_len} tokens", tokens.len());
        }
        std::iter::once(CLS_ID)
            .chain(tokens.iter().take(max_len).map(|t| self.id(t.as_ref())))
            .collect()
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        self.encode_tokens(&tokenize(text), max_len)
    }
}
