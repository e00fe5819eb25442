use std::collections::HashMap;
use std::path::Path;

use super::LmBackend;
use crate::dist::{DenseDist, Embedding};
use crate::error::{Error, Result};
use crate::vocab::TokenId;
use crate::wire::{read_file, Reader, Writer};

pub const RECORD_MAGIC: [u8; 4] = *b"NNPR";
pub const RECORD_VERSION: u32 = 1;

/// Distributions coming from exported f32 files may drift this far from one.
const RECORD_SUM_TOLERANCE: f64 = 1e-4;

/// Backend that serves precomputed (embedding, distribution) pairs keyed by
/// the exact context token sequence.
#[derive(Debug, Clone)]
pub struct RecordLm {
    dim: usize,
    vocab_size: usize,
    order: Vec<Vec<TokenId>>,
    records: HashMap<Vec<TokenId>, (Embedding, DenseDist)>,
}

impl RecordLm {
    pub fn new(dim: usize, vocab_size: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(0));
        }
        Ok(Self {
            dim,
            vocab_size,
            order: Vec::new(),
            records: HashMap::new(),
        })
    }

    /// Captures `backend`'s outputs for each distinct context, in first-seen order.
    pub fn capture<'a, B, I>(backend: &B, contexts: I) -> Result<Self>
    where
        B: LmBackend + ?Sized,
        I: IntoIterator<Item = &'a [TokenId]>,
    {
        let mut out = Self::new(backend.dim(), backend.vocab_size())?;
        for ctx in contexts {
            if out.records.contains_key(ctx) {
                continue;
            }
            let emb = backend.encode(ctx)?;
            let dist = backend.next_dist(ctx)?;
            out.insert(ctx.to_vec(), emb, dist)?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, context: Vec<TokenId>, emb: Embedding, dist: DenseDist) -> Result<()> {
        if emb.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: emb.dim(),
            });
        }
        if dist.len() != self.vocab_size {
            return Err(Error::Data(format!(
                "distribution has {} entries, vocabulary has {}",
                dist.len(),
                self.vocab_size
            )));
        }
        if self.records.contains_key(&context) {
            return Err(Error::Data("duplicate context in record set".into()));
        }
        self.order.push(context.clone());
        self.records.insert(context, (emb, dist));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contexts(&self) -> impl Iterator<Item = &[TokenId]> {
        self.order.iter().map(Vec::as_slice)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::create(path.as_ref())?;
        w.bytes(&RECORD_MAGIC)?;
        w.u32(RECORD_VERSION)?;
        w.u32(self.dim as u32)?;
        w.u32(self.vocab_size as u32)?;
        w.u64(self.order.len() as u64)?;
        for ctx in &self.order {
            let (emb, dist) = &self.records[ctx];
            w.u32(ctx.len() as u32)?;
            for t in ctx {
                w.u32(t.0)?;
            }
            w.f32s(emb.as_slice())?;
            w.f32s(dist.as_slice())?;
        }
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = read_file(path)?;
        Self::parse(&buf).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })
    }

    fn parse(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(RECORD_MAGIC)?;
        let version = r.u32()?;
        if version != RECORD_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = r.u32()?;
        if dim == 0 {
            return Err(Error::InvalidDimension(dim));
        }
        let vocab_size = r.u32()? as usize;
        let count = r.u64()?;
        let mut out = Self::new(dim as usize, vocab_size)?;
        for i in 0..count {
            let offset = r.position();
            let at = |msg: String| Error::parse(format!("record {i} (byte offset {offset})"), msg);
            let ctx_len = r.u32()? as usize;
            let ctx_bytes = r.take(ctx_len.checked_mul(4).ok_or_else(|| at("context too long".into()))?)?;
            let ctx: Vec<TokenId> = ctx_bytes
                .chunks_exact(4)
                .map(|c| TokenId(u32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            if let Some(t) = ctx.iter().find(|t| t.index() >= vocab_size) {
                return Err(at(format!("token id {t} outside vocabulary of size {vocab_size}")));
            }
            let mut emb = Vec::with_capacity(dim as usize);
            r.f32s(dim as usize, &mut emb)?;
            let emb = Embedding::new(emb).map_err(|e| at(e.to_string()))?;
            let mut probs = Vec::with_capacity(vocab_size);
            r.f32s(vocab_size, &mut probs)?;
            let dist = DenseDist::new(probs, RECORD_SUM_TOLERANCE).map_err(|e| at(e.to_string()))?;
            out.insert(ctx, emb, dist).map_err(|e| at(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(Error::parse(
                format!("byte offset {}", r.position()),
                format!("{} trailing bytes after last record", r.remaining()),
            ));
        }
        Ok(out)
    }

    fn get(&self, context: &[TokenId]) -> Result<&(Embedding, DenseDist)> {
        self.records.get(context).ok_or(Error::UnknownContext)
    }
}

impl LmBackend for RecordLm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn encode(&self, context: &[TokenId]) -> Result<Embedding> {
        self.get(context).map(|(e, _)| e.clone())
    }

    fn next_dist(&self, context: &[TokenId]) -> Result<DenseDist> {
        self.get(context).map(|(_, d)| d.clone())
    }
}
