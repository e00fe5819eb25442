//! Inverted-file index: keys are partitioned by Lloyd's k-means and a query
//! scans only the `nprobe` lists whose centroids are nearest.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{cmp_key, flat_search, scan, sq_l2, NeighborSet};
use crate::datastore::Datastore;
use crate::dist::Embedding;
use crate::error::{Error, Result};
use crate::wire::{read_file, Reader, Writer};

pub const INDEX_MAGIC: [u8; 4] = *b"KNNI";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IvfParams {
    pub nlist: usize,
    pub seed: u64,
    pub kmeans_iters: usize,
}

impl IvfParams {
    pub fn new(nlist: usize, seed: u64) -> Self {
        Self {
            nlist,
            seed,
            kmeans_iters: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    dim: usize,
    kmeans_seed: u64,
    centroids: Vec<f32>,
    lists: Vec<Vec<u64>>,
}

/// Index of the nearest centroid, ties to the lower list.
fn nearest(centroids: &[f32], dim: usize, key: &[f32]) -> usize {
    let mut best = (0usize, f32::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_l2(key, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn assign(store: &Datastore, centroids: &[f32]) -> Vec<usize> {
    let dim = store.dim();
    (0..store.len())
        .into_par_iter()
        .map(|i| nearest(centroids, dim, store.key(i)))
        .collect()
}

/// Builds an IVF index with 20 k-means iterations.
pub fn ivf_build(store: &Datastore, nlist: usize, seed: u64) -> Result<IvfIndex> {
    IvfIndex::build(store, IvfParams::new(nlist, seed))
}

impl IvfIndex {
    /// Lloyd's k-means seeded from `nlist` distinct random entries. Empty
    /// clusters keep their previous centroid; a final assignment pass makes
    /// every entry belong to its nearest final centroid.
    pub fn build(store: &Datastore, params: IvfParams) -> Result<Self> {
        let IvfParams { nlist, seed, kmeans_iters } = params;
        if nlist == 0 {
            return Err(Error::Config("nlist must be at least 1".into()));
        }
        if store.len() < nlist {
            return Err(Error::Config(format!(
                "nlist {nlist} exceeds datastore size {}",
                store.len()
            )));
        }
        let dim = store.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = rand::seq::index::sample(&mut rng, store.len(), nlist);
        let mut centroids: Vec<f32> = Vec::with_capacity(nlist * dim);
        for i in init.iter() {
            centroids.extend_from_slice(store.key(i));
        }

        for _ in 0..kmeans_iters {
            let assignment = assign(store, &centroids);
            let mut sums = vec![0.0f64; nlist * dim];
            let mut counts = vec![0usize; nlist];
            for (i, &c) in assignment.iter().enumerate() {
                counts[c] += 1;
                for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(store.key(i)) {
                    *s += f64::from(x);
                }
            }
            for c in 0..nlist {
                if counts[c] == 0 {
                    continue;
                }
                let n = counts[c] as f64;
                for j in 0..dim {
                    centroids[c * dim + j] = (sums[c * dim + j] / n) as f32;
                }
            }
        }

        let assignment = assign(store, &centroids);
        let mut lists = vec![Vec::new(); nlist];
        for (i, &c) in assignment.iter().enumerate() {
            lists[c].push(i as u64);
        }
        Ok(Self {
            dim,
            kmeans_seed: seed,
            centroids,
            lists,
        })
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kmeans_seed(&self) -> u64 {
        self.kmeans_seed
    }

    pub fn centroid(&self, list: usize) -> &[f32] {
        &self.centroids[list * self.dim..(list + 1) * self.dim]
    }

    pub fn list(&self, list: usize) -> &[u64] {
        &self.lists[list]
    }

    /// List id per entry.
    pub fn assignments(&self) -> Vec<usize> {
        let n = self.lists.iter().map(Vec::len).sum();
        let mut out = vec![0; n];
        for (c, list) in self.lists.iter().enumerate() {
            for &i in list {
                out[i as usize] = c;
            }
        }
        out
    }

    /// Checks that the lists partition exactly the entries of `store`.
    pub fn check_store(&self, store: &Datastore) -> Result<()> {
        if store.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: store.dim(),
            });
        }
        let mut seen = vec![false; store.len()];
        for &i in self.lists.iter().flatten() {
            match seen.get_mut(i as usize) {
                Some(s) if !*s => *s = true,
                _ => return Err(Error::Data(format!("index entry {i} is out of range or repeated"))),
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("index does not cover every datastore entry".into()));
        }
        Ok(())
    }

    pub(crate) fn check_nprobe(&self, nprobe: usize) -> Result<()> {
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::Config(format!(
                "nprobe {nprobe} must be in 1..={}",
                self.nlist()
            )));
        }
        Ok(())
    }

    /// Lists ordered by centroid distance to `query`, ties to the lower id.
    fn probe_order(&self, query: &[f32]) -> Vec<usize> {
        let mut order: Vec<(f32, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(c, centroid)| (sq_l2(query, centroid), c))
            .collect();
        order.sort_by(|a, b| cmp_key(a.0, a.1 as u64, b.0, b.1 as u64));
        order.into_iter().map(|(_, c)| c).collect()
    }

    /// Exact search restricted to the `nprobe` nearest lists. May return fewer
    /// than `k` neighbors when the probed lists are small.
    pub fn search(&self, store: &Datastore, query: &[f32], k: usize, nprobe: usize) -> Result<NeighborSet> {
        super::check_query(store, query, k)?;
        if store.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: store.dim(),
            });
        }
        self.check_nprobe(nprobe)?;
        let probed = self.probe_order(query);
        let candidates = probed[..nprobe]
            .iter()
            .flat_map(|&c| self.lists[c].iter().map(|&i| i as usize));
        Ok(scan(store, query, k, candidates))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::create(path.as_ref())?;
        w.bytes(&INDEX_MAGIC)?;
        w.u32(INDEX_VERSION)?;
        w.u32(self.nlist() as u32)?;
        w.u32(self.dim as u32)?;
        w.u64(self.kmeans_seed)?;
        w.f32s(&self.centroids)?;
        for list in &self.lists {
            w.u64(list.len() as u64)?;
            for &i in list {
                w.u64(i)?;
            }
        }
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(INDEX_MAGIC)?;
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let nlist = r.u32()? as usize;
        let dim = r.u32()?;
        if dim == 0 {
            return Err(Error::InvalidDimension(dim));
        }
        if nlist == 0 {
            return Err(Error::parse("header", "nlist is zero"));
        }
        let dim = dim as usize;
        let kmeans_seed = r.u64()?;
        let mut centroids = Vec::with_capacity(nlist * dim);
        r.f32s(nlist * dim, &mut centroids)?;
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Data("centroid is not finite".into()));
        }
        let mut lists = Vec::with_capacity(nlist);
        for _ in 0..nlist {
            let len = r.u64()? as usize;
            if len > r.remaining() / 8 {
                return Err(Error::Truncated {
                    expected: (r.position() + len * 8) as u64,
                    actual: buf.len() as u64,
                });
            }
            lists.push((0..len).map(|_| r.u64()).collect::<Result<Vec<_>>>()?);
        }
        if r.remaining() != 0 {
            return Err(Error::parse(
                format!("byte offset {}", r.position()),
                format!("{} trailing bytes", r.remaining()),
            ));
        }
        Ok(Self {
            dim,
            kmeans_seed,
            centroids,
            lists,
        })
    }
}

/// Mean over queries of the fraction of exact neighbors the IVF search finds.
/// The denominator is the exact result size, `min(k, store.len())`.
pub fn recall_at_k(
    index: &IvfIndex,
    store: &Datastore,
    queries: &[Embedding],
    k: usize,
    nprobe: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::NoQueries);
    }
    let mut total = 0.0;
    for q in queries {
        let exact = flat_search(store, q.as_slice(), k)?;
        let approx = index.search(store, q.as_slice(), k, nprobe)?;
        if exact.is_empty() {
            total += 1.0;
            continue;
        }
        let found: std::collections::HashSet<u64> =
            approx.as_slice().iter().map(|n| n.entry_index).collect();
        let hits = exact
            .as_slice()
            .iter()
            .filter(|n| found.contains(&n.entry_index))
            .count();
        total += hits as f64 / exact.len() as f64;
    }
    Ok(total / queries.len() as f64)
}
