//! Fuzzy verbalizers: each verbalizer token is expanded to the nearest words
//! in a word-vector space plus its lexicon synonyms.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::dist::SparseDist;
use crate::error::{Error, Result};
use crate::vocab::{normalized_pieces, TokenId, Vocab};

/// Similar words taken from the vector space per verbalizer token.
pub const DEFAULT_TOP_K: usize = 5;

pub type Neighborhood = BTreeSet<TokenId>;

/// Word vectors in the GloVe text layout.
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    dim: usize,
    words: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl WordVectors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let word = word.into();
        if self.words.is_empty() {
            if vector.is_empty() {
                return Err(Error::InvalidDimension(0));
            }
            self.dim = vector.len();
        } else if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("vector for {word:?} is not finite")));
        }
        if self.index.contains_key(&word) {
            return Err(Error::Data(format!("duplicate vector for {word:?}")));
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.data.extend(vector);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let vector = parts
                .map(|p| p.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(format!("line {}", lineno + 1), e.to_string()))?;
            out.insert(word, vector)
                .map_err(|e| Error::parse(format!("line {}", lineno + 1), e.to_string()))?;
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { location, message } => Error::parse(format!("{}: {location}", path.display()), message),
            other => other,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// The `k` words most cosine-similar to `word`, excluding `word` itself.
/// Ties are ordered lexicographically.
pub fn top_k_similar(vectors: &WordVectors, word: &str, k: usize) -> Result<Vec<String>> {
    let &qi = vectors
        .index
        .get(word)
        .ok_or_else(|| Error::NoVector(word.to_owned()))?;
    let query = vectors.vector(qi);
    let mut scored: Vec<(f64, &str)> = vectors
        .words
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != qi)
        .map(|(i, w)| (cosine(query, vectors.vector(i)), w.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, w)| w.to_owned()).collect())
}

/// Directed synonym lists, read from `word<TAB>synonym` lines.
#[derive(Debug, Clone, Default)]
pub struct SynonymLexicon {
    entries: HashMap<String, BTreeSet<String>>,
}

impl SynonymLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: impl Into<String>, synonym: impl Into<String>) {
        self.entries.entry(word.into()).or_default().insert(synonym.into());
    }

    pub fn synonyms(&self, word: &str) -> impl Iterator<Item = &str> {
        self.entries.get(word).into_iter().flatten().map(String::as_str)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, syn) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(format!("line {}", lineno + 1), "expected word<TAB>synonym"))?;
            let (word, syn) = (word.trim(), syn.trim());
            if word.is_empty() || syn.is_empty() {
                return Err(Error::parse(format!("line {}", lineno + 1), "empty field"));
            }
            out.insert(word, syn);
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { location, message } => Error::parse(format!("{}: {location}", path.display()), message),
            other => other,
        })
    }
}

/// Resolves a word to a single in-vocabulary token. Words that normalize to
/// several pieces, or to an unknown piece, resolve to nothing.
pub fn resolve_single(word: &str, vocab: &Vocab) -> Option<TokenId> {
    let mut pieces = normalized_pieces(word);
    let piece = pieces.next()?;
    if pieces.next().is_some() {
        return None;
    }
    vocab.id(&piece).filter(|&t| t != TokenId::UNK)
}

/// `{v}` plus its top-5 vector neighbors and lexicon synonyms, restricted to
/// single in-vocabulary tokens.
pub fn build_neighborhood(
    vectors: &WordVectors,
    lexicon: &SynonymLexicon,
    verbalizer_token: &str,
    vocab: &Vocab,
) -> Result<Neighborhood> {
    let v = resolve_single(verbalizer_token, vocab).ok_or_else(|| {
        Error::Config(format!("verbalizer token {verbalizer_token:?} is not a single vocabulary token"))
    })?;
    let mut out = BTreeSet::from([v]);
    let similar = if vectors.contains(verbalizer_token) {
        top_k_similar(vectors, verbalizer_token, DEFAULT_TOP_K)?
    } else {
        Vec::new()
    };
    let expansions = similar.iter().map(String::as_str).chain(lexicon.synonyms(verbalizer_token));
    out.extend(expansions.filter_map(|w| resolve_single(w, vocab)));
    Ok(out)
}

/// True iff some neighborhood intersects the support of `p_knn`.
pub fn coverage(p_knn: &SparseDist, neighborhoods: &[Neighborhood]) -> bool {
    p_knn
        .support()
        .any(|t| neighborhoods.iter().any(|n| n.contains(&t)))
}
