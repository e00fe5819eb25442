//! Criterion benchmarks for retrieval and datastore construction live in
//! `benches/`. Run with `cargo bench -p nnprompt-bench`.
