//! Embeddings and next-token probability distributions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Absolute tolerance on the total mass of a normalized distribution.
pub const PROB_TOLERANCE: f64 = 1e-6;

/// A context representation produced by a language model.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidDimension(0));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("embedding component {i} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }
}

/// Normalizes nonnegative weights to sum to one.
pub fn normalize(weights: &[f64]) -> Result<Vec<f64>> {
    let mut total = 0.0;
    for &w in weights {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Data(format!("invalid weight {w}")));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::DegenerateDistribution);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// A distribution over the whole vocabulary, indexed by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDist {
    probs: Vec<f32>,
}

impl DenseDist {
    /// Wraps probabilities that already sum to one within `tolerance`.
    pub fn new(probs: Vec<f32>, tolerance: f64) -> Result<Self> {
        let mut total = 0.0f64;
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::Data(format!("probability {i} is {p}")));
            }
            total += f64::from(p);
        }
        if (total - 1.0).abs() > tolerance {
            return Err(Error::Data(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let probs = normalize(weights)?;
        Ok(Self {
            probs: probs.into_iter().map(|p| p as f32).collect(),
        })
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            probs: vec![1.0 / len as f32; len],
        }
    }

    pub(crate) fn from_raw(probs: Vec<f32>) -> Self {
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, id: TokenId) -> f32 {
        self.probs.get(id.index()).copied().unwrap_or(0.0)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.probs
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().map(|&p| f64::from(p)).sum()
    }

    pub fn argmax(&self) -> Option<TokenId> {
        let mut best: Option<(usize, f32)> = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if best.map_or(true, |(_, b)| p > b) {
                best = Some((i, p));
            }
        }
        best.map(|(i, _)| TokenId(i as u32))
    }
}

/// A distribution with explicit support, sorted by token id.
///
/// May be empty, meaning "no mass"; an empty distribution is only
/// meaningful as an interpolation input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseDist {
    entries: Vec<(TokenId, f32)>,
}

impl SparseDist {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Normalizes a weight map. Zero-weight entries are dropped from the support.
    pub fn from_weights(weights: &BTreeMap<TokenId, f64>) -> Result<Self> {
        let values: Vec<f64> = weights.values().copied().collect();
        let probs = normalize(&values)?;
        let entries = weights
            .keys()
            .zip(probs)
            .filter(|(_, p)| *p > 0.0)
            .map(|(&id, p)| (id, p as f32))
            .filter(|(_, p)| *p > 0.0)
            .collect();
        Ok(Self { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn prob(&self, id: TokenId) -> f32 {
        match self.entries.binary_search_by_key(&id, |&(t, _)| t) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn entries(&self) -> &[(TokenId, f32)] {
        &self.entries
    }

    pub fn support(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|&(t, _)| t)
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|&(_, p)| f64::from(p)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sparse(pairs: &[(u32, f64)]) -> SparseDist {
        let map = pairs.iter().map(|&(t, w)| (TokenId(t), w)).collect();
        SparseDist::from_weights(&map).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let d = sparse(&[(1, 2.0), (2, 2.0)]);
        assert_eq!(d.prob(TokenId(1)), 0.5);
        assert_eq!(d.prob(TokenId(2)), 0.5);
        assert_eq!(sparse(&[(1, 1.0)]).prob(TokenId(1)), 1.0);
        let d = sparse(&[(1, 1.0), (2, 3.0)]);
        assert_eq!(d.prob(TokenId(1)), 0.25);
        assert_eq!(d.prob(TokenId(2)), 0.75);
    }

    #[test]
    fn normalize_rejects_all_zero() {
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::DegenerateDistribution)));
        assert!(matches!(normalize(&[]), Err(Error::DegenerateDistribution)));
        assert!(normalize(&[-1.0, 2.0]).is_err());
        assert!(normalize(&[f64::NAN]).is_err());
    }

    #[test]
    fn dense_validation() {
        assert!(DenseDist::new(vec![0.5, 0.5], PROB_TOLERANCE).is_ok());
        assert!(DenseDist::new(vec![0.5, 0.4], PROB_TOLERANCE).is_err());
        assert!(DenseDist::new(vec![1.5, -0.5], PROB_TOLERANCE).is_err());
        let u = DenseDist::uniform(4);
        assert_eq!(u.as_slice(), &[0.25; 4]);
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(Embedding::new(vec![1.0, f32::NAN]).is_err());
        assert!(Embedding::new(vec![]).is_err());
        assert_eq!(Embedding::zeros(3).dim(), 3);
    }

    proptest! {
        #[test]
        fn normalized_sums_to_one(weights in proptest::collection::vec(0.0f64..1e6, 1..200)) {
            prop_assume!(weights.iter().any(|&w| w > 0.0));
            let d = DenseDist::from_weights(&weights).unwrap();
            prop_assert!((d.total() - 1.0).abs() <= PROB_TOLERANCE);
            prop_assert!(d.as_slice().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
