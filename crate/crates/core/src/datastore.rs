//! Key-value store of (context embedding, next token) pairs built by running
//! a backend over an unlabeled corpus.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lm::LmBackend;
use crate::vocab::{TokenId, Vocab};
use crate::wire::{read_file, Reader, Writer};

pub const DATASTORE_MAGIC: [u8; 4] = *b"KNND";
pub const DATASTORE_VERSION: u32 = 1;
const FLAG_PROVENANCE: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 4 + 8 + 4;

/// Where a stored value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub corpus_id: u16,
    /// Token offset into the corpus token stream (all documents, in order).
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<TokenId>,
    provenance: Option<Vec<Provenance>>,
}

impl Datastore {
    pub fn new(
        dim: usize,
        keys: Vec<f32>,
        values: Vec<TokenId>,
        provenance: Option<Vec<Provenance>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(0));
        }
        if keys.len() != values.len() * dim {
            return Err(Error::Data(format!(
                "{} key components for {} values of dim {dim}",
                keys.len(),
                values.len()
            )));
        }
        if let Some(p) = &provenance {
            if p.len() != values.len() {
                return Err(Error::Data("provenance length differs from entry count".into()));
            }
        }
        if keys.iter().any(|k| !k.is_finite()) {
            return Err(Error::Data("datastore key is not finite".into()));
        }
        Ok(Self {
            dim,
            keys,
            values,
            provenance,
        })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new(), None)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn value(&self, i: usize) -> TokenId {
        self.values[i]
    }

    pub fn values(&self) -> &[TokenId] {
        &self.values
    }

    pub fn provenance(&self) -> Option<&[Provenance]> {
        self.provenance.as_deref()
    }

    /// Checks that every value is a valid id for a vocabulary of `vocab_size`.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.values.iter().find(|v| v.index() >= vocab_size) {
            Some(v) => Err(Error::Data(format!(
                "datastore value {v} outside vocabulary of size {vocab_size}"
            ))),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::create(path.as_ref())?;
        w.bytes(&DATASTORE_MAGIC)?;
        w.u32(DATASTORE_VERSION)?;
        w.u32(self.dim as u32)?;
        w.u64(self.values.len() as u64)?;
        w.u32(if self.provenance.is_some() { FLAG_PROVENANCE } else { 0 })?;
        w.f32s(&self.keys)?;
        for v in &self.values {
            w.u32(v.0)?;
        }
        if let Some(prov) = &self.provenance {
            for p in prov {
                w.u16(p.corpus_id)?;
                w.u64(p.offset)?;
            }
        }
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(DATASTORE_MAGIC)?;
        let version = r.u32()?;
        if version != DATASTORE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = r.u32()?;
        if dim == 0 {
            return Err(Error::InvalidDimension(dim));
        }
        let count = r.u64()?;
        let flags = r.u32()?;
        if flags & !FLAG_PROVENANCE != 0 {
            return Err(Error::parse("header", format!("unknown flags {flags:#x}")));
        }
        let has_prov = flags & FLAG_PROVENANCE != 0;
        let per_entry = u64::from(dim) * 4 + 4 + if has_prov { 10 } else { 0 };
        let expected = count
            .checked_mul(per_entry)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::parse("header", format!("entry count {count} overflows")))?;
        let actual = buf.len() as u64;
        if actual < expected {
            return Err(Error::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(Error::parse(
                format!("byte offset {expected}"),
                format!("{} trailing bytes", actual - expected),
            ));
        }
        let count = count as usize;
        let dim = dim as usize;
        let mut keys = Vec::with_capacity(count * dim);
        r.f32s(count * dim, &mut keys)?;
        let values = (0..count)
            .map(|_| r.u32().map(TokenId))
            .collect::<Result<Vec<_>>>()?;
        let provenance = if has_prov {
            Some(
                (0..count)
                    .map(|_| {
                        Ok(Provenance {
                            corpus_id: r.u16()?,
                            offset: r.u64()?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Self::new(dim, keys, values, provenance)
    }
}

/// Concatenates stores in the given order.
pub fn merge(stores: &[Datastore]) -> Result<Datastore> {
    let first = stores
        .first()
        .ok_or_else(|| Error::Config("merge needs at least one datastore".into()))?;
    let dim = first.dim;
    if let Some(s) = stores.iter().find(|s| s.dim != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: s.dim,
        });
    }
    let keep_prov = stores.iter().all(|s| s.provenance.is_some());
    let mut keys = Vec::with_capacity(stores.iter().map(|s| s.keys.len()).sum());
    let mut values = Vec::with_capacity(stores.iter().map(Datastore::len).sum());
    let mut prov = keep_prov.then(Vec::new);
    for s in stores {
        keys.extend_from_slice(&s.keys);
        values.extend_from_slice(&s.values);
        if let (Some(out), Some(p)) = (prov.as_mut(), s.provenance.as_ref()) {
            out.extend_from_slice(p);
        }
    }
    Datastore::new(dim, keys, values, prov)
}

/// A tokenized corpus split into independent documents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Vec<TokenId>>,
}

impl Corpus {
    pub fn new(documents: Vec<Vec<TokenId>>) -> Self {
        Self {
            documents: documents.into_iter().filter(|d| !d.is_empty()).collect(),
        }
    }

    /// Splits text into documents at blank lines and tokenizes each.
    pub fn from_text(text: &str, vocab: &Vocab) -> Self {
        Self::new(split_documents(text).map(|d| vocab.tokenize(&d)).collect())
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text, vocab))
    }

    pub fn documents(&self) -> &[Vec<TokenId>] {
        &self.documents
    }

    pub fn token_count(&self) -> u64 {
        self.documents.iter().map(|d| d.len() as u64).sum()
    }

    pub fn token_at(&self, mut offset: u64) -> Option<TokenId> {
        for doc in &self.documents {
            if offset < doc.len() as u64 {
                return Some(doc[offset as usize]);
            }
            offset -= doc.len() as u64;
        }
        None
    }
}

/// Yields blank-line separated paragraphs.
pub fn split_documents(text: &str) -> impl Iterator<Item = String> + '_ {
    let mut lines = text.lines().peekable();
    std::iter::from_fn(move || {
        while lines.peek().is_some_and(|l| l.trim().is_empty()) {
            lines.next();
        }
        let mut doc = String::new();
        while let Some(line) = lines.next_if(|l| !l.trim().is_empty()) {
            if !doc.is_empty() {
                doc.push('\n');
            }
            doc.push_str(line);
        }
        (!doc.is_empty()).then_some(doc)
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    pub provenance: bool,
    pub corpus_id: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub tokens_ingested: u64,
    pub entries_written: u64,
    pub elapsed: Duration,
}

/// Emits one entry per token that has a nonempty left context within its
/// document. Documents are encoded in parallel and assembled in input order.
pub fn build<B: LmBackend + ?Sized>(
    corpus: &Corpus,
    backend: &B,
    opts: BuildOptions,
) -> Result<(Datastore, BuildReport)> {
    let start = Instant::now();
    let dim = backend.dim();
    let mut starts = Vec::with_capacity(corpus.documents.len());
    let mut offset = 0u64;
    for doc in &corpus.documents {
        starts.push(offset);
        offset += doc.len() as u64;
    }

    let per_doc: Vec<(Vec<f32>, Vec<TokenId>, Vec<Provenance>)> = corpus
        .documents
        .par_iter()
        .zip(starts.par_iter())
        .map(|(doc, &doc_start)| {
            let n = doc.len().saturating_sub(1);
            let mut keys = Vec::with_capacity(n * dim);
            let mut values = Vec::with_capacity(n);
            let mut prov = Vec::new();
            for i in 1..doc.len() {
                let key = backend.encode(&doc[..i])?;
                if key.dim() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        actual: key.dim(),
                    });
                }
                keys.extend_from_slice(key.as_slice());
                values.push(doc[i]);
                if opts.provenance {
                    prov.push(Provenance {
                        corpus_id: opts.corpus_id,
                        offset: doc_start + i as u64,
                    });
                }
            }
            Ok((keys, values, prov))
        })
        .collect::<Result<_>>()?;

    let total: usize = per_doc.iter().map(|(_, v, _)| v.len()).sum();
    let mut keys = Vec::with_capacity(total * dim);
    let mut values = Vec::with_capacity(total);
    let mut prov = opts.provenance.then(|| Vec::with_capacity(total));
    for (k, v, p) in per_doc {
        keys.extend(k);
        values.extend(v);
        if let Some(out) = prov.as_mut() {
            out.extend(p);
        }
    }
    let store = Datastore::new(dim, keys, values, prov)?;
    let report = BuildReport {
        tokens_ingested: corpus.token_count(),
        entries_written: store.len() as u64,
        elapsed: start.elapsed(),
    };
    Ok((store, report))
}
