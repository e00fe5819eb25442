//! Retrieval-augmented zero-shot classification.
//!
//! A datastore maps context embeddings to the tokens that followed them. At
//! inference the prompt's embedding retrieves its nearest entries, their
//! values form a kNN next-token distribution, and that distribution is mixed
//! into the base LM's. Labels are scored through fuzzy verbalizer
//! neighborhoods and calibrated by domain-conditional PMI.

pub mod datastore;
pub mod dist;
pub mod error;
pub mod eval;
pub mod index;
pub mod knn;
pub mod lm;
pub mod pipeline;
mod rng;
pub mod synthetic;
pub mod tasks;
pub mod verbalizer;
pub mod vocab;
mod wire;

pub use datastore::{build, merge, BuildOptions, BuildReport, Corpus, Datastore, Provenance};
pub use dist::{DenseDist, Embedding, SparseDist};
pub use error::{Error, ErrorKind, Result};
pub use eval::{EvalConfig, EvalInputs, EvalReport, SweepGrid, SweepRow};
pub use index::{flat_search, IvfIndex, IvfParams, Neighbor, NeighborSet, Retriever};
pub use knn::{interpolate, knn_distribution, RetrievalConfig};
pub use lm::{LmBackend, RecordLm, ToyConfig, ToyLbLm};
pub use pipeline::{predict, LabelScores, PmiPrior, Prediction, Resources, ScoringMode};
pub use tasks::{Instance, Task, TaskSpec};
pub use verbalizer::{Neighborhood, SynonymLexicon, WordVectors};
pub use vocab::{TokenId, Vocab};
