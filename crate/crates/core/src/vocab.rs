//! Token vocabulary and the whitespace tokenizer.
//!
//! Id 0 is always the `<unk>` token, so every tokenizer output is a valid
//! vocabulary id.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

/// Index into a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const UNK: TokenId = TokenId(0);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list whose first entry is `<unk>`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::Data(format!("vocabulary must start with {UNK_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Never true: `<unk>` is always present.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        id.index() < self.tokens.len()
    }

    /// Maps text to token ids; out-of-vocabulary pieces become [`TokenId::UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        normalized_pieces(text)
            .map(|piece| self.id(&piece).unwrap_or(TokenId::UNK))
            .collect()
    }

    /// Reads the one-token-per-line vocabulary format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::parse(
                format!("{}:1", path.display()),
                format!("first line must be {UNK_TOKEN}"),
            ));
        }
        for (line, tok) in tokens.iter().enumerate().skip(1) {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), line + 1),
                    "token is empty or contains whitespace",
                ));
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Lowercases, splits on whitespace and trims non-alphanumeric edges.
pub fn normalized_pieces(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|piece| {
        let trimmed = piece.trim_matches(|c: char| !c.is_alphanumeric());
        if trimmed.is_empty() {
            None
        } else {
            Some(trimmed.to_lowercase())
        }
    })
}

/// Tokenizes `text` against `vocab`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    vocab.tokenize(text)
}

/// Frequency counts over normalized pieces. Feeding the same text in any
/// chunking (split at whitespace) yields the same counts.
#[derive(Debug, Default, Clone)]
pub struct TokenCounter {
    counts: HashMap<String, u64>,
}

impl TokenCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, text: &str) {
        for piece in normalized_pieces(text) {
            *self.counts.entry(piece).or_insert(0) += 1;
        }
    }

    /// `<unk>` plus the `max_size - 1` most frequent pieces, ties broken
    /// lexicographically.
    pub fn finish(self, max_size: usize) -> Result<Vocab> {
        if max_size == 0 {
            return Err(Error::Config("max vocabulary size must be at least 1".into()));
        }
        let mut ranked: Vec<(String, u64)> = self.counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = std::iter::once(UNK_TOKEN.to_owned())
            .chain(ranked.into_iter().take(max_size - 1).map(|(t, _)| t))
            .collect();
        Vocab::from_tokens(tokens)
    }
}

/// Builds a vocabulary from a stream of text chunks.
pub fn build_vocab<I, S>(corpus: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counter = TokenCounter::new();
    for chunk in corpus {
        counter.feed(chunk.as_ref());
    }
    counter.finish(max_size)
}
