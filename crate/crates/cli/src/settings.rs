//! Settings from a `--config` JSON file. Command-line flags win over the
//! file, the file wins over `NNPROMPT_SEED`, and built-in defaults come last.

use std::path::Path;

use nnprompt_core::pipeline::{PmiPrior, ScoringMode};
use nnprompt_core::{Error, ToyConfig};
use serde::Deserialize;

pub const SEED_ENV: &str = "NNPROMPT_SEED";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub k: Option<usize>,
    pub temperature: Option<f64>,
    pub lambda: Option<f64>,
    pub nprobe: Option<usize>,
    pub modes: Option<Vec<ScoringMode>>,
    pub pmi_prior: Option<PmiPrior>,
    pub shots: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub lm: Option<ToyConfig>,
    pub ks: Option<Vec<usize>>,
    pub temperatures: Option<Vec<f64>>,
    pub lambdas: Option<Vec<f64>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    /// Base seed: flag, then config file, then the environment, then 0.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64, Error> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(std::env::VarError::NotPresent) => Ok(0),
            Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
    }
}

pub fn pick<T: Clone>(flag: Option<T>, file: &Option<T>, default: T) -> T {
    flag.or_else(|| file.clone()).unwrap_or(default)
}

pub fn pick_list<T: Clone>(flag: &[T], file: &Option<Vec<T>>, default: Vec<T>) -> Vec<T> {
    if !flag.is_empty() {
        flag.to_vec()
    } else {
        file.clone().unwrap_or(default)
    }
}
