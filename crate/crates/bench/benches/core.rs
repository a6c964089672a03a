use std::hint::black_box;

use codistill::metrics::{gap, map_metric, DEFAULT_CAP};
use codistill::training::Session;
use codistill::{Graph, Mode};
use codistill_bench::{desk_data, desk_net, desk_train_config, matrix, ranking};
use criterion::{criterion_group, criterion_main, Criterion};

fn tensors(c: &mut Criterion) {
    let a = matrix(64, 256, 1);
    let b = matrix(256, 256, 2);
    c.bench_function("matmul 64x256x256 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(a.clone());
            let w = g.param(b.clone());
            let y = g.matmul(x, w).unwrap();
            let s = g.square(y).unwrap();
            let loss = g.sum(s).unwrap();
            black_box(g.backprop(loss).unwrap());
        })
    });
}

fn training(c: &mut Criterion) {
    let data = desk_data();
    let cfg = desk_train_config();
    let idx: Vec<usize> = (0..cfg.batch_size).collect();
    let mut session = Session::new(desk_net(1), &cfg);
    c.bench_function("desk model train step (batch 20)", |bench| {
        bench.iter(|| black_box(session.train_step(&data, &idx, &cfg, 0.01).unwrap()))
    });
    let net = desk_net(2);
    let batch = data.batch(&(0..200).collect::<Vec<_>>()).unwrap();
    c.bench_function("desk model eval forward (200 rows)", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            black_box(net.forward(&mut g, &batch, Mode::Eval).unwrap().ensemble)
        })
    });
}

fn metrics(c: &mut Criterion) {
    let (preds, truth) = ranking(2000, 50);
    c.bench_function("gap 2000x50", |bench| {
        bench.iter(|| black_box(gap(&preds, &truth, DEFAULT_CAP).unwrap()))
    });
    c.bench_function("map 2000x50", |bench| {
        bench.iter(|| black_box(map_metric(&preds, &truth, DEFAULT_CAP).unwrap()))
    });
}

criterion_group!(benches, tensors, training, metrics);
criterion_main!(benches);
