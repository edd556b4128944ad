use chdqr::geometry::{voronoi_areas, BoundingBox};
use chdqr::quantizer::{soft_labels, usage, PrototypeSet};
use chdqr::training::{TrainConfig, TrainState, Variant};
use chdqr::{data, Matrix};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};

fn random_points(k: usize, seed: u64) -> Matrix {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let data: Vec<f64> = (0..2 * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(k, 2, data).unwrap()
}

fn unit_box() -> BoundingBox {
    BoundingBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()
}

fn bench_voronoi(c: &mut Criterion) {
    let mut group = c.benchmark_group("voronoi_areas");
    for k in [16usize, 256, 2500] {
        let points = random_points(k, 1);
        let bbox = unit_box();
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| voronoi_areas(&points, &bbox).unwrap())
        });
    }
    group.finish();
}

fn bench_soft_labels(c: &mut Criterion) {
    let protos = PrototypeSet::new(random_points(2500, 2), unit_box()).unwrap();
    let targets = random_points(4096, 3);
    c.bench_function("soft_labels/k2500", |b| {
        b.iter(|| soft_labels(targets.row(0), &protos, 0.05).unwrap())
    });
    c.bench_function("usage/k2500_n4096", |b| {
        b.iter(|| usage(&protos, &targets, 0.05).unwrap())
    });
}

fn bench_epoch(c: &mut Criterion) {
    let ds = data::gen_uncond1d(4000, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for variant in [Variant::Static, Variant::Dynamic] {
        group.bench_function(format!("{variant:?}"), |b| {
            b.iter_batched(
                || TrainState::new(&ds, &cfg, variant, 0).unwrap(),
                |mut state| {
                    let features = state.scaler.apply_all(&ds.features);
                    state.train_epoch(&features, &ds.targets).unwrap()
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench_voronoi, bench_soft_labels, bench_epoch);
criterion_main!(benches);
