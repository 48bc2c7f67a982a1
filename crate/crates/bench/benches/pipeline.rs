use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::s;
use std::hint::black_box;

use driftnet::train::squared_loss_gradients;
use driftnet::{
    benchmark_model, convert_to_unit_weights, init_network, make_regression_set, simulate_path, subsample, train,
    BenchmarkParams, ReluNetwork, TrainConfig,
};

fn simulation(c: &mut Criterion) {
    let model = benchmark_model(BenchmarkParams::default()).unwrap();
    c.bench_function("milstein path T=10", |b| {
        b.iter(|| simulate_path(&model, black_box(10.0), 1e-3, &[0.0, 0.0], 7).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let model = benchmark_model(BenchmarkParams::default()).unwrap();
    let traj = simulate_path(&model, 100.0, 1e-3, &[0.0, 0.0], 1).unwrap();
    let regset = make_regression_set(&subsample(&traj, 20).unwrap()).unwrap();
    let net = init_network(&[2, 32, 32, 2], 3).unwrap();
    let x = regset.inputs.slice(s![..64, ..]);
    let y = regset.responses.slice(s![..64, ..]);

    c.bench_function("forward batch 64", |b| b.iter(|| net.forward_batch(black_box(x))));
    c.bench_function("loss gradients batch 64", |b| {
        b.iter(|| squared_loss_gradients(&net, black_box(x), black_box(y)))
    });

    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    c.bench_function("train one epoch skip=20 T=100", |b| {
        b.iter_batched(|| net.clone(), |n| train(&n, &regset, &config).unwrap(), BatchSize::SmallInput)
    });

    let head = net.head(0).unwrap();
    let k = 4.0 / head.max_weight();
    let head = ReluNetwork::new(
        head.weights().iter().map(|w| w * k).collect(),
        head.shifts().iter().map(|v| v * k).collect(),
    )
    .unwrap();
    c.bench_function("unit-weight conversion", |b| b.iter(|| convert_to_unit_weights(black_box(&head)).unwrap()));
}

criterion_group!(benches, simulation, network);
criterion_main!(benches);
