use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nnprompt_core::datastore::{build, BuildOptions};
use nnprompt_core::synthetic::{SyntheticConfig, SyntheticFixture};
use nnprompt_core::{flat_search, knn_distribution, IvfIndex, IvfParams, LmBackend};

fn fixture(entries: usize) -> SyntheticFixture {
    SyntheticFixture::generate(SyntheticConfig {
        entries,
        ..Default::default()
    })
    .expect("fixture")
}

fn search(c: &mut Criterion) {
    let fx = fixture(20_000);
    let store = fx.datastore().expect("datastore");
    let lm = fx.lm().expect("lm");
    let query = lm.encode(&fx.vocab.tokenize("the sunny warm film it was")).expect("encode");
    let index = IvfIndex::build(&store, IvfParams::new(64, 0)).expect("ivf");

    let mut group = c.benchmark_group("search");
    for k in [16, 1024] {
        group.bench_with_input(BenchmarkId::new("flat", k), &k, |b, &k| {
            b.iter(|| flat_search(&store, black_box(query.as_slice()), k).unwrap())
        });
        for nprobe in [1, 8] {
            group.bench_with_input(BenchmarkId::new(format!("ivf_nprobe{nprobe}"), k), &k, |b, &k| {
                b.iter(|| index.search(&store, black_box(query.as_slice()), k, nprobe).unwrap())
            });
        }
    }
    group.finish();

    let neighbors = flat_search(&store, query.as_slice(), 1024).expect("search");
    c.bench_function("knn_distribution/1024", |b| {
        b.iter(|| knn_distribution(black_box(neighbors.as_slice()), 3.0).unwrap())
    });
}

fn construction(c: &mut Criterion) {
    let fx = fixture(5_000);
    let corpus = fx.corpus();
    let lm = fx.lm().expect("lm");
    c.bench_function("build_datastore/5000", |b| {
        b.iter(|| build(black_box(&corpus), &lm, BuildOptions::default()).unwrap())
    });
    let store = fx.datastore().expect("datastore");
    c.bench_function("ivf_build/5000/nlist32", |b| {
        b.iter(|| IvfIndex::build(black_box(&store), IvfParams::new(32, 0)).unwrap())
    });
}

criterion_group!(benches, search, construction);
criterion_main!(benches);
