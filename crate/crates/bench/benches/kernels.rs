use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use modelguard_bench::noise_batch;
use modelguard_core::attacks::prune_layers;
use modelguard_core::cw::{search, CwParams, CwTarget};
use modelguard_core::train::objective;
use modelguard_core::watermark::{plan_spec, WatermarkRegularizer};
use modelguard_core::*;

fn forward(c: &mut Criterion) {
    let model = build_lenet5(10, 1).unwrap();
    let mut g = c.benchmark_group("lenet5_forward");
    for batch in [1usize, 64, 256] {
        let data = noise_batch(batch, 2);
        g.throughput(Throughput::Elements(batch as u64));
        g.bench_with_input(BenchmarkId::from_parameter(batch), &data, |b, d| {
            b.iter(|| model.logits(black_box(d.pixels()), batch))
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let model = build_lenet5(10, 1).unwrap();
    let data = noise_batch(64, 3);
    let plan = WatermarkPlan {
        layer: DEFAULT_WATERMARK_LAYER.into(),
        digits: WM1.to_vec(),
        lambda: 0.01,
        seed: 4,
        range: MapRange::default(),
        reference_range: None,
    };
    let hook = WatermarkRegularizer::new(&model, &plan_spec(&model, &plan).unwrap())
        .unwrap()
        .hook();
    let mut g = c.benchmark_group("lenet5_objective_batch64");
    g.throughput(Throughput::Elements(64));
    g.bench_function("plain", |b| {
        b.iter(|| objective(&model, black_box(data.pixels()), data.labels(), None))
    });
    g.bench_function("watermarked", |b| {
        b.iter(|| objective(&model, black_box(data.pixels()), data.labels(), Some(&hook)))
    });
    g.finish();
}

fn cw_iterations(c: &mut Criterion) {
    let model = build_lenet5(10, 1).unwrap();
    let data = noise_batch(20, 5);
    let seeds: Vec<&[f32]> = (0..20).map(|i| data.image(i)).collect();
    let params = CwParams {
        learning_rate: 0.005,
        alpha_lo: 0.0,
        alpha_hi: 40.0,
        initial_alpha: 20.0,
        max_iterations: 20,
        search_steps: 1,
        abort_early: false,
    };
    let target = CwTarget {
        class: 0,
        pin: Some((0.2, 0.005)),
        spread: false,
    };
    let mut g = c.benchmark_group("cw");
    g.sample_size(20);
    g.throughput(Throughput::Elements(20 * 20));
    g.bench_function("20_images_x_20_iterations", |b| {
        b.iter(|| search(&model, black_box(&seeds), target, &params))
    });
    g.finish();
}

fn prune(c: &mut Criterion) {
    let model = build_lenet5(10, 1).unwrap();
    c.bench_function("prune_all_layers_80", |b| {
        b.iter(|| prune_layers(black_box(&model), 0.8).unwrap())
    });
}

criterion_group!(benches, forward, train_step, cw_iterations, prune);
criterion_main!(benches);
