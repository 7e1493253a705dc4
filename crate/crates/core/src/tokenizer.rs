//! Word-level vocabulary and fixed-length encoding.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Post;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

pub const DEFAULT_MIN_FREQ: usize = 2;
pub const DEFAULT_MAX_SIZE: usize = 8000;
pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("max_size {0} cannot hold the reserved tokens plus content (need at least 4)")]
    MaxSizeTooSmall(usize),
    #[error("max_len {0} is too short (need at least 2)")]
    MaxLenTooShort(usize),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("invalid vocabulary file: {0}")]
    InvalidVocab(String),
    #[error("vocabulary I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Splits cleaned text into tokens: whitespace-delimited units, with runs
/// of punctuation split off into their own tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for unit in text.split_whitespace() {
        let mut start = 0;
        let mut prev: Option<bool> = None;
        for (i, c) in unit.char_indices() {
            let word = c.is_alphanumeric();
            if prev.is_some_and(|p| p != word) {
                out.push(&unit[start..i]);
                start = i;
            }
            prev = Some(word);
        }
        if start < unit.len() {
            out.push(&unit[start..]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
    max_size: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    min_freq: usize,
    max_size: usize,
}

impl Vocab {
    /// Builds a vocabulary from document texts. Tokens rarer than
    /// `min_freq` are dropped; the rest are ranked by descending frequency
    /// with lexicographic tie-breaks and truncated to `max_size` entries
    /// including the three reserved tokens.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
        max_size: usize,
    ) -> Result<Self, TokenizerError> {
        if max_size < 4 {
            return Err(TokenizerError::MaxSizeTooSmall(max_size));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        let mut docs = 0;
        for text in texts {
            docs += 1;
            for tok in tokenize(text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if docs == 0 {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(_, n)| n >= min_freq.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_parts(tokens, min_freq, max_size))
    }

    fn from_parts(tokens: Vec<String>, min_freq: usize, max_size: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            min_freq,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile {
            tokens: self.tokens.clone(),
            min_freq: self.min_freq,
            max_size: self.max_size,
        })
        .expect("vocab serialises")
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile =
            serde_json::from_str(json).map_err(|e| TokenizerError::InvalidVocab(e.to_string()))?;
        if file.tokens.len() < RESERVED.len()
            || file.tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(TokenizerError::InvalidVocab(
                "reserved tokens <pad>, <unk>, <cls> must occupy ids 0..3".into(),
            ));
        }
        if file.tokens.len() > file.max_size {
            return Err(TokenizerError::InvalidVocab(format!(
                "{} tokens exceed max_size {}",
                file.tokens.len(),
                file.max_size
            )));
        }
        let vocab = Self::from_parts(file.tokens, file.min_freq, file.max_size);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TokenizerError::InvalidVocab("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let json = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&json)
    }

    /// `[CLS]` followed by token ids, truncated to `max_len` and padded.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence, TokenizerError> {
        if max_len < 2 {
            return Err(TokenizerError::MaxLenTooShort(max_len));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(
            tokenize(text)
                .into_iter()
                .take(max_len - 1)
                .map(|t| self.id(t).unwrap_or(UNK)),
        );
        let true_length = ids.len();
        ids.resize(max_len, PAD);
        let mask = (0..max_len).map(|i| u8::from(i < true_length)).collect();
        Ok(TokenSequence {
            ids,
            mask,
            true_length,
        })
    }

    /// Drops PAD and CLS and joins the remaining tokens with single spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut words = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            if id != PAD && id != CLS {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }
}

/// Vocabulary over the cleaned text of `posts`.
pub fn build_vocab(posts: &[Post], min_freq: usize, max_size: usize) -> Result<Vocab, TokenizerError> {
    Vocab::build(posts.iter().map(|p| p.text.as_str()), min_freq, max_size)
}

/// Padded token ids with their attention mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}
