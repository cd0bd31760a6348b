use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use milab::aggregators::{AggKind, AggregatorConfig, AggregatorModel};
use milab::losses::{batch_sup_con, sup_con, AnchorRows, SimilarityConfig};
use milab::numcore::{matmul_sequential, Matrix};

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| r.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let a = random(512, 256, 1);
    let b = random(256, 256, 2);
    let mut g = c.benchmark_group("matmul_512x256x256");
    g.bench_function("parallel", |bch| {
        bch.iter(|| black_box(a.matmul(&b).unwrap()))
    });
    g.bench_function("sequential", |bch| {
        bch.iter(|| black_box(matmul_sequential(&a, &b).unwrap()))
    });
    g.finish();
}

fn bag_scoring(c: &mut Criterion) {
    let bags: Vec<Matrix> = (0..64).map(|i| random(50, 32, 10 + i)).collect();
    let model =
        AggregatorModel::from_config(&AggregatorConfig::with_kind(AggKind::DsMil), 32, 3).unwrap();
    let mut g = c.benchmark_group("ds_mil_64_bags");
    g.bench_function("parallel", |bch| {
        bch.iter(|| black_box(model.predict_many(&bags).unwrap()))
    });
    g.bench_function("sequential", |bch| {
        bch.iter(|| {
            black_box(
                bags.iter()
                    .map(|h| model.predict(h).unwrap())
                    .collect::<Vec<_>>(),
            )
        })
    });
    g.finish();
}

fn contrastive_batch(c: &mut Criterion) {
    let z = random(2048, 16, 5);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let anchors: Vec<AnchorRows> = (0..128)
        .map(|_| AnchorRows {
            anchor: r.random_range(0..2048),
            same: (0..8).map(|_| r.random_range(0..2048)).collect(),
            diff: (0..8).map(|_| r.random_range(0..2048)).collect(),
        })
        .collect();
    let cfg = SimilarityConfig::new(0.5).unwrap();
    let mut g = c.benchmark_group("sup_con_128_anchors");
    g.bench_function("parallel", |bch| {
        bch.iter(|| black_box(batch_sup_con(&z, &anchors, 0.5).unwrap()))
    });
    g.bench_function("sequential", |bch| {
        bch.iter(|| {
            let total: f64 = anchors
                .iter()
                .map(|a| {
                    let same: Vec<&[f64]> = a.same.iter().map(|&i| z.row(i)).collect();
                    let diff: Vec<&[f64]> = a.diff.iter().map(|&i| z.row(i)).collect();
                    sup_con(z.row(a.anchor), &same, &diff, cfg).unwrap().loss
                })
                .sum();
            black_box(total)
        })
    });
    g.finish();
}

criterion_group!(benches, matmul, bag_scoring, contrastive_batch);
criterion_main!(benches);
