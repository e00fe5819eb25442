use serde::{Deserialize, Serialize};

use super::LmBackend;
use crate::dist::{DenseDist, Embedding};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::vocab::TokenId;

/// Multiplier mixing the token id into the per-row generator seed.
const ROW_SEED_MIX: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub dim: usize,
    pub window: usize,
    /// Multiplier applied to dot-product logits.
    pub logit_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 16,
            window: 8,
            logit_scale: 5.0,
        }
    }
}

/// Fixed, untrained log-bilinear language model.
///
/// Token embeddings are unit-norm Gaussian rows drawn from a per-token
/// SplitMix64 stream. A context is encoded as the normalized mean of its
/// last `window` token rows, and next-token logits are scaled dot products
/// against every row.
#[derive(Debug, Clone)]
pub struct ToyLbLm {
    config: ToyConfig,
    vocab_size: usize,
    table: Vec<f32>,
}

impl ToyLbLm {
    pub fn new(vocab_size: usize, config: ToyConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::Config("toy LM dim must be positive".into()));
        }
        if config.window == 0 {
            return Err(Error::Config("toy LM window must be positive".into()));
        }
        if !(config.logit_scale > 0.0) || !config.logit_scale.is_finite() {
            return Err(Error::Config("toy LM logit scale must be positive".into()));
        }
        if vocab_size == 0 {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let mut table = Vec::with_capacity(vocab_size * config.dim);
        let mut row = vec![0.0f64; config.dim];
        for id in 0..vocab_size as u64 {
            embedding_row(config.seed, id, &mut row);
            table.extend(row.iter().map(|&x| x as f32));
        }
        Ok(Self {
            config,
            vocab_size,
            table,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn row(&self, id: TokenId) -> &[f32] {
        let d = self.config.dim;
        &self.table[id.index() * d..(id.index() + 1) * d]
    }

    fn check(&self, context: &[TokenId]) -> Result<()> {
        match context.iter().find(|t| t.index() >= self.vocab_size) {
            Some(t) => Err(Error::Data(format!(
                "token id {t} outside vocabulary of size {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }
}

/// Unit-normalized Gaussian row for token `id`, in f64.
fn embedding_row(seed: u64, id: u64, out: &mut [f64]) {
    let mut rng = SplitMix64::new(seed.wrapping_add((id + 1).wrapping_mul(ROW_SEED_MIX)));
    rng.fill_gaussian(out);
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in out.iter_mut() {
        *x /= norm;
    }
}

impl LmBackend for ToyLbLm {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn encode(&self, context: &[TokenId]) -> Result<Embedding> {
        self.check(context)?;
        let dim = self.config.dim;
        let tail = &context[context.len().saturating_sub(self.config.window)..];
        let mut acc = vec![0.0f64; dim];
        for &t in tail {
            for (a, &x) in acc.iter_mut().zip(self.row(t)) {
                *a += f64::from(x);
            }
        }
        if !tail.is_empty() {
            let n = tail.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|a| *a /= norm);
        }
        Ok(Embedding::new(acc.into_iter().map(|x| x as f32).collect())
            .expect("toy embedding is finite and nonempty"))
    }

    fn next_dist(&self, context: &[TokenId]) -> Result<DenseDist> {
        if context.is_empty() {
            return Ok(DenseDist::uniform(self.vocab_size));
        }
        let h = self.encode(context)?;
        let h = h.as_slice();
        let scale = self.config.logit_scale;
        let logits: Vec<f64> = self
            .table
            .chunks_exact(self.config.dim)
            .map(|row| {
                scale
                    * row
                        .iter()
                        .zip(h)
                        .map(|(&e, &x)| f64::from(e) * f64::from(x))
                        .sum::<f64>()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(DenseDist::from_raw(
            exps.into_iter().map(|e| (e / total) as f32).collect(),
        ))
    }
}
