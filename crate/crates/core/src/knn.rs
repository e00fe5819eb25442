//! Turning retrieved neighbors into a next-token distribution and mixing it
//! with the language model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dist::{DenseDist, SparseDist};
use crate::error::{Error, Result};
use crate::index::Neighbor;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub temperature: f64,
    pub lambda: f64,
    /// Lists to probe when an IVF index is in use.
    pub nprobe: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 1024,
            temperature: 3.0,
            lambda: 0.3,
            nprobe: None,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        check_temperature(self.temperature)?;
        check_lambda(self.lambda)?;
        if self.nprobe == Some(0) {
            return Err(Error::Config("nprobe must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive and finite, got {t}")))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")))
    }
}

/// Unnormalized per-token weights `sum exp(-(d - d_min) / t)`.
///
/// Subtracting the minimum distance leaves the normalized result unchanged
/// and keeps the largest weight at exactly one.
pub fn knn_weights<I>(neighbors: I, temperature: f64) -> BTreeMap<TokenId, f64>
where
    I: IntoIterator<Item = (f64, TokenId)>,
    I::IntoIter: Clone,
{
    let iter = neighbors.into_iter();
    let min = iter.clone().map(|(d, _)| d).fold(f64::INFINITY, f64::min);
    let mut weights = BTreeMap::new();
    for (d, v) in iter {
        *weights.entry(v).or_insert(0.0) += (-(d - min) / temperature).exp();
    }
    weights
}

/// Temperature softmax over negative squared distances, aggregated by value.
/// No neighbors gives an empty distribution.
pub fn knn_distribution(neighbors: &[Neighbor], temperature: f64) -> Result<SparseDist> {
    check_temperature(temperature)?;
    if neighbors.is_empty() {
        return Ok(SparseDist::empty());
    }
    let weights = knn_weights(
        neighbors.iter().map(|n| (f64::from(n.sq_dist), n.value)),
        temperature,
    );
    SparseDist::from_weights(&weights)
}

#[inline]
pub fn mix(p_lm: f64, p_knn: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * p_lm + lambda * p_knn
}

/// `(1 - lambda) * p_lm + lambda * p_knn`. An empty `p_knn` returns `p_lm`.
pub fn interpolate(p_lm: &DenseDist, p_knn: &SparseDist, lambda: f64) -> Result<DenseDist> {
    check_lambda(lambda)?;
    if p_knn.is_empty() {
        return Ok(p_lm.clone());
    }
    let mut out: Vec<f64> = p_lm
        .as_slice()
        .iter()
        .map(|&p| (1.0 - lambda) * f64::from(p))
        .collect();
    for &(t, p) in p_knn.entries() {
        let slot = out.get_mut(t.index()).ok_or_else(|| {
            Error::Data(format!("kNN token {t} outside LM vocabulary of size {}", p_lm.len()))
        })?;
        *slot += lambda * f64::from(p);
    }
    Ok(DenseDist::from_raw(out.into_iter().map(|p| p as f32).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::PROB_TOLERANCE;
    use proptest::prelude::*;

    fn nb(i: u64, d: f32, v: u32) -> Neighbor {
        Neighbor {
            entry_index: i,
            sq_dist: d,
            value: TokenId(v),
        }
    }

    #[test]
    fn knn_examples() {
        let d = knn_distribution(&[nb(0, 0.0, 1)], 3.0).unwrap();
        assert_eq!(d.entries(), &[(TokenId(1), 1.0)]);

        let d = knn_distribution(&[nb(0, 1.0, 1), nb(1, 1.0, 2)], 1.0).unwrap();
        assert_eq!(d.entries(), &[(TokenId(1), 0.5), (TokenId(2), 0.5)]);

        let ln4 = 4f64.ln();
        let w = knn_weights([(0.0, TokenId(1)), (ln4, TokenId(2))], 1.0);
        let total: f64 = w.values().sum();
        assert!((w[&TokenId(1)] / total - 0.8).abs() < 1e-12);
        assert!((w[&TokenId(2)] / total - 0.2).abs() < 1e-12);
        let d = knn_distribution(&[nb(0, 0.0, 1), nb(1, ln4 as f32, 2)], 1.0).unwrap();
        assert!((d.prob(TokenId(1)) - 0.8).abs() < 1e-6);
        assert!((d.prob(TokenId(2)) - 0.2).abs() < 1e-6);
    }

    #[test]
    fn knn_empty_and_bad_temperature() {
        assert!(knn_distribution(&[], 1.0).unwrap().is_empty());
        assert!(knn_distribution(&[nb(0, 0.0, 1)], 0.0).is_err());
        assert!(knn_distribution(&[nb(0, 0.0, 1)], -1.0).is_err());
    }

    #[test]
    fn values_aggregate() {
        let d = knn_distribution(&[nb(0, 0.0, 5), nb(1, 0.0, 5), nb(2, 0.0, 6)], 1.0).unwrap();
        assert!((d.prob(TokenId(5)) - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn interpolate_examples() {
        let lm = DenseDist::new(vec![0.6, 0.4], PROB_TOLERANCE).unwrap();
        let knn = SparseDist::from_weights(&[(TokenId(0), 1.0)].into_iter().collect()).unwrap();
        assert_eq!(interpolate(&lm, &knn, 0.0).unwrap(), lm);
        assert_eq!(interpolate(&lm, &knn, 1.0).unwrap().as_slice(), &[1.0, 0.0]);
        let out = interpolate(&lm, &knn, 0.3).unwrap();
        assert!((out.as_slice()[0] - 0.72).abs() < 1e-7);
        assert!((out.as_slice()[1] - 0.28).abs() < 1e-7);
        assert_eq!(interpolate(&lm, &SparseDist::empty(), 0.3).unwrap(), lm);
        assert!(interpolate(&lm, &knn, 1.5).is_err());
        let far = SparseDist::from_weights(&[(TokenId(9), 1.0)].into_iter().collect()).unwrap();
        assert!(interpolate(&lm, &far, 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        let bad = RetrievalConfig { k: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig { lambda: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig { temperature: f64::INFINITY, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn neighbors() -> impl Strategy<Value = Vec<(f64, u32)>> {
        proptest::collection::vec((0.0f64..50.0, 0u32..8), 1..40)
    }

    proptest! {
        #[test]
        fn shift_invariance(ns in neighbors(), c in 0.0f64..1000.0, t in 0.1f64..10.0) {
            let base = knn_weights(ns.iter().map(|&(d, v)| (d, TokenId(v))), t);
            let shifted = knn_weights(ns.iter().map(|&(d, v)| (d + c, TokenId(v))), t);
            let zb: f64 = base.values().sum();
            let zs: f64 = shifted.values().sum();
            for (k, w) in &base {
                prop_assert!((w / zb - shifted[k] / zs).abs() < 1e-9);
            }
        }

        #[test]
        fn order_invariance(mut ns in neighbors(), t in 0.1f64..10.0) {
            let a: Vec<Neighbor> = ns.iter().enumerate().map(|(i, &(d, v))| nb(i as u64, d as f32, v)).collect();
            ns.reverse();
            let b: Vec<Neighbor> = ns.iter().enumerate().map(|(i, &(d, v))| nb(i as u64, d as f32, v)).collect();
            let da = knn_distribution(&a, t).unwrap();
            let db = knn_distribution(&b, t).unwrap();
            prop_assert_eq!(da.support().collect::<Vec<_>>(), db.support().collect::<Vec<_>>());
            for (&(_, p), &(_, q)) in da.entries().iter().zip(db.entries()) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }

        #[test]
        fn cold_limit_concentrates_on_nearest(ns in neighbors()) {
            let a: Vec<Neighbor> = ns.iter().enumerate().map(|(i, &(d, v))| nb(i as u64, d as f32, v)).collect();
            let dmin = a.iter().map(|n| n.sq_dist).fold(f32::INFINITY, f32::min);
            let d = knn_distribution(&a, 1e-12).unwrap();
            let nearest: std::collections::BTreeSet<TokenId> =
                a.iter().filter(|n| n.sq_dist == dmin).map(|n| n.value).collect();
            prop_assert_eq!(d.support().collect::<std::collections::BTreeSet<_>>(), nearest);
        }

        #[test]
        fn interpolation_is_affine(a in 0.0f64..1.0, b in 0.0f64..1.0, lm in 0.0f64..1.0, knn in 0.0f64..1.0) {
            let mid = mix(lm, knn, (a + b) / 2.0);
            let avg = (mix(lm, knn, a) + mix(lm, knn, b)) / 2.0;
            prop_assert!((mid - avg).abs() <= 4.0 * f64::EPSILON);
        }
    }
}
