use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use diskidx::bench::{build_index, IndexParams};
use diskidx::model::{greedy_pla, optimal_pla};
use diskidx::workload::{gen_synthetic, Distribution};
use diskidx::{IndexKind, IoContext, OrderedIndex, Record};

const N: usize = 100_000;

fn records() -> Vec<Record> {
    gen_synthetic(Distribution::Lognormal, N, 1).records()
}

fn build(kind: IndexKind, dir: &std::path::Path, recs: &[Record], buffer: usize) -> Box<dyn OrderedIndex> {
    let ctx = IoContext::new(buffer);
    build_index(kind, &dir.join(kind.name()), recs, 4096, &IndexParams::default(), &ctx).unwrap()
}

fn lookups(c: &mut Criterion) {
    let recs = records();
    let mut g = c.benchmark_group("lookup");
    for kind in IndexKind::ALL {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = build(kind, dir.path(), &recs, 64);
        let mut i = 0usize;
        g.bench_function(kind.name(), |b| {
            b.iter(|| {
                i = (i + 7919) % recs.len();
                black_box(idx.lookup(recs[i].key).unwrap())
            })
        });
    }
    g.finish();
}

fn scans(c: &mut Criterion) {
    let recs = records();
    let mut g = c.benchmark_group("scan100");
    for kind in IndexKind::ALL {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = build(kind, dir.path(), &recs, 64);
        let mut i = 0usize;
        g.bench_function(kind.name(), |b| {
            b.iter(|| {
                i = (i + 7919) % recs.len();
                black_box(idx.scan(recs[i].key, 100).unwrap())
            })
        });
    }
    g.finish();
}

fn inserts(c: &mut Criterion) {
    let all = records();
    // Even positions are bulk loaded, odd ones inserted.
    let bulk: Vec<Record> = all.iter().step_by(2).copied().collect();
    let fresh: Vec<Record> = all.iter().skip(1).step_by(2).take(1000).copied().collect();
    let mut g = c.benchmark_group("insert1000");
    g.sample_size(10);
    for kind in IndexKind::ALL {
        g.bench_function(kind.name(), |b| {
            b.iter_batched(
                || {
                    let dir = tempfile::tempdir().unwrap();
                    let idx = build(kind, dir.path(), &bulk, 64);
                    (dir, idx)
                },
                |(_dir, mut idx)| {
                    for r in &fresh {
                        idx.insert(r.key, r.payload).unwrap();
                    }
                },
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

fn pla(c: &mut Criterion) {
    let keys = gen_synthetic(Distribution::Lognormal, N, 2).keys;
    let mut g = c.benchmark_group("pla");
    g.bench_function("optimal_eps64", |b| b.iter(|| optimal_pla(black_box(&keys), 64).unwrap().len()));
    g.bench_function("greedy_eps64", |b| b.iter(|| greedy_pla(black_box(&keys), 64).unwrap().len()));
    g.finish();
}

criterion_group!(benches, lookups, scans, inserts, pla);
criterion_main!(benches);
