//! Whole-word frequency vocabulary and caption tokenization.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::TokenSequence;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIAL: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Dense token list; the position of a token is its id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(file: VocabFile) -> Result<Self> {
        Vocabulary::from_tokens(file.tokens)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::Dataset("vocabulary must start with the five special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Dataset(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// sha256 over the token list, one token per line.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Lowercases and splits on whitespace; every punctuation character is its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Keeps the `max_size − 5` most frequent words; ties go to the lexicographically smaller word.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Dataset("cannot build a vocabulary from an empty corpus".into()));
    }
    if max_size < NUM_SPECIAL {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size {max_size} leaves no room for the {NUM_SPECIAL} special tokens"
        )));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for caption in corpus {
        for w in split_words(caption.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    for s in SPECIAL_TOKENS {
        counts.remove(s);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size - NUM_SPECIAL).map(|(w, _)| w));
    Vocabulary::from_tokens(tokens)
}

/// `[CLS] words… [SEP]` truncated to `max_len` (keeping both markers) and padded with `[PAD]`.
pub fn tokenize(caption: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!("max_len {max_len} cannot hold [CLS] and [SEP]")));
    }
    let words = split_words(caption);
    let keep = words.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(words[..keep].iter().map(|w| vocab.id(w)));
    ids.push(SEP_ID);
    let content = ids.len();
    ids.resize(max_len, PAD_ID);
    let pad_mask = (0..max_len).map(|i| i >= content).collect();
    TokenSequence::new(ids, pad_mask)
}
