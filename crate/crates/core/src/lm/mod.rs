//! Language-model backends.
//!
//! A backend maps a left context to a context embedding (the retrieval key)
//! and a next-token distribution. Both must be deterministic in the context.

mod records;
mod toy;

pub use records::{RecordLm, RECORD_MAGIC, RECORD_VERSION};
pub use toy::{ToyConfig, ToyLbLm};

use crate::dist::{DenseDist, Embedding};
use crate::error::Result;
use crate::vocab::TokenId;

pub trait LmBackend: Send + Sync {
    fn dim(&self) -> usize;

    fn vocab_size(&self) -> usize;

    fn encode(&self, context: &[TokenId]) -> Result<Embedding>;

    fn next_dist(&self, context: &[TokenId]) -> Result<DenseDist>;
}
