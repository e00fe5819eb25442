//! Exact and IVF k-nearest-neighbor search over datastore keys, using
//! squared L2 distance. Ties are broken by the lower entry index so every
//! search result is fully determined.

mod ivf;

pub use ivf::{ivf_build, recall_at_k, IvfIndex, IvfParams, INDEX_MAGIC, INDEX_VERSION};

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub entry_index: u64,
    pub sq_dist: f32,
    pub value: TokenId,
}

/// Neighbors in ascending `(sq_dist, entry_index)` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet {
    neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn from_sorted(neighbors: Vec<Neighbor>) -> Self {
        debug_assert!(neighbors
            .windows(2)
            .all(|w| cmp_key(w[0].sq_dist, w[0].entry_index, w[1].sq_dist, w[1].entry_index).is_lt()));
        Self { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn as_slice(&self) -> &[Neighbor] {
        &self.neighbors
    }

    /// The `k` nearest of these neighbors.
    pub fn top(&self, k: usize) -> &[Neighbor] {
        &self.neighbors[..k.min(self.neighbors.len())]
    }

    pub fn truncate(&mut self, k: usize) {
        self.neighbors.truncate(k);
    }
}

#[inline]
fn cmp_key(da: f32, ia: u64, db: f32, ib: u64) -> Ordering {
    da.total_cmp(&db).then(ia.cmp(&ib))
}

/// Squared Euclidean distance, accumulated in f32 in component order.
#[inline]
pub fn sq_l2(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[derive(PartialEq)]
struct Candidate {
    sq_dist: f32,
    index: u64,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_key(self.sq_dist, self.index, other.sq_dist, other.index)
    }
}

fn check_query(store: &Datastore, query: &[f32], k: usize) -> Result<()> {
    if query.len() != store.dim() {
        return Err(Error::DimMismatch {
            expected: store.dim(),
            actual: query.len(),
        });
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(())
}

/// Exact top-`k` among `candidates` using a bounded max-heap.
fn scan(store: &Datastore, query: &[f32], k: usize, candidates: impl Iterator<Item = usize>) -> NeighborSet {
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k.min(store.len()) + 1);
    for i in candidates {
        let c = Candidate {
            sq_dist: sq_l2(store.key(i), query),
            index: i as u64,
        };
        if heap.len() < k {
            heap.push(c);
        } else if let Some(mut top) = heap.peek_mut() {
            if c < *top {
                *top = c;
            }
        }
    }
    let neighbors = heap
        .into_sorted_vec()
        .into_iter()
        .map(|c| Neighbor {
            entry_index: c.index,
            sq_dist: c.sq_dist,
            value: store.value(c.index as usize),
        })
        .collect();
    NeighborSet { neighbors }
}

/// Exact search over every entry; returns `min(k, store.len())` neighbors.
pub fn flat_search(store: &Datastore, query: &[f32], k: usize) -> Result<NeighborSet> {
    check_query(store, query, k)?;
    Ok(scan(store, query, k, 0..store.len()))
}

/// Search strategy bound to a datastore.
#[derive(Debug, Clone, Copy)]
pub enum Retriever<'a> {
    Flat(&'a Datastore),
    Ivf {
        store: &'a Datastore,
        index: &'a IvfIndex,
        nprobe: usize,
    },
}

impl<'a> Retriever<'a> {
    pub fn ivf(store: &'a Datastore, index: &'a IvfIndex, nprobe: usize) -> Result<Self> {
        index.check_store(store)?;
        index.check_nprobe(nprobe)?;
        Ok(Retriever::Ivf { store, index, nprobe })
    }

    pub fn store(&self) -> &'a Datastore {
        match self {
            Retriever::Flat(s) => s,
            Retriever::Ivf { store, .. } => store,
        }
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        match *self {
            Retriever::Flat(store) => flat_search(store, query, k),
            Retriever::Ivf { store, index, nprobe } => index.search(store, query, k, nprobe),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(keys: &[[f32; 2]], values: &[u32]) -> Datastore {
        Datastore::new(
            2,
            keys.iter().flatten().copied().collect(),
            values.iter().copied().map(TokenId).collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn flat_examples() {
        let s = store(&[[0.0, 0.0], [3.0, 4.0]], &[10, 11]);
        let r = flat_search(&s, &[0.0, 0.0], 1).unwrap();
        assert_eq!(
            r.as_slice(),
            &[Neighbor { entry_index: 0, sq_dist: 0.0, value: TokenId(10) }]
        );
        let r = flat_search(&s, &[0.0, 0.0], 2).unwrap();
        assert_eq!(r.as_slice()[1], Neighbor { entry_index: 1, sq_dist: 25.0, value: TokenId(11) });
        let r = flat_search(&s, &[3.0, 4.0], 10).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.as_slice()[0].entry_index, 1);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let s = store(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], &[1, 2, 3, 4]);
        let r = flat_search(&s, &[0.0, 0.0], 3).unwrap();
        let idx: Vec<u64> = r.as_slice().iter().map(|n| n.entry_index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn flat_errors() {
        let s = store(&[[0.0, 0.0]], &[1]);
        assert!(matches!(flat_search(&s, &[0.0], 1), Err(Error::DimMismatch { .. })));
        assert!(flat_search(&s, &[0.0, 0.0], 0).is_err());
        let empty = Datastore::empty(2).unwrap();
        assert!(flat_search(&empty, &[0.0, 0.0], 4).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn growing_k_keeps_prefix(n in 1usize..60, k1 in 1usize..30, k2 in 1usize..30, seed in any::<u64>()) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let keys: Vec<f32> = (0..n * 3).map(|_| (rng.next_u64() % 5) as f32).collect();
            let s = Datastore::new(3, keys, (0..n as u32).map(TokenId).collect(), None).unwrap();
            let q = [1.0, 2.0, 0.0];
            let a = flat_search(&s, &q, k1).unwrap();
            let b = flat_search(&s, &q, k2).unwrap();
            let m = k1.min(k2).min(n);
            prop_assert_eq!(a.top(m), b.top(m));
            prop_assert!(a.as_slice().windows(2).all(|w| w[0].sq_dist <= w[1].sq_dist));
        }
    }
}
