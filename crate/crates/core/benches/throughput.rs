//! Batch rendering and TCN gradient throughput on one worker versus the
//! default pool. Build with `--no-default-features` to time the sequential
//! fallback.

use std::hint::black_box;

use ampzoo::augmentation::{derive_seed, render_pair, rng_from};
use ampzoo::model_zoo::DeviceRegistry;
use ampzoo::par;
use ampzoo::tcn::TcnModel;
use ampzoo::toy::{toy_corpus, toy_devices};
use ampzoo::train::{batch_loss_grad, LossKind, Objective, TcnArch};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn pools() -> Vec<(&'static str, usize)> {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("one_worker", 1), ("default_pool", default)]
}

fn render_batch(c: &mut Criterion) {
    let corpus = toy_corpus(10.0, 2, 16000, 3).unwrap();
    let registry = DeviceRegistry::from_models(toy_devices(8), 1).unwrap();
    let mut group = c.benchmark_group("render_batch_32x0.25s");
    for (label, workers) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(label), &workers, |b, &w| {
            b.iter(|| {
                par::with_workers(w, || {
                    par::map_range(32, |i| {
                        let mut rng = rng_from(derive_seed(5, &[i as u64]));
                        render_pair(&corpus, &registry, i % 8, 0.25, &mut rng).unwrap().wet.samples.len()
                    })
                })
            })
        });
    }
    group.finish();
}

fn tcn_batch_grad(c: &mut Criterion) {
    let corpus = toy_corpus(10.0, 2, 16000, 4).unwrap();
    let registry = DeviceRegistry::from_models(toy_devices(4), 1).unwrap();
    let arch = TcnArch { n_blocks: 1, layers_per_block: 6, channels: 8, kernel_size: 3, dilation_growth: 2, embed_dim: 8 };
    let model = TcnModel::init(arch.config(4), 1).unwrap();
    let items: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..4)
        .map(|d| {
            let p = render_pair(&corpus, &registry, d, 0.25, &mut rng_from(d as u64)).unwrap();
            (d, p.clean.to_f64(), p.wet.to_f64())
        })
        .collect();
    let obj = Objective::new(LossKind::EsrMrsl);
    let mut group = c.benchmark_group("tcn_batch_grad_4x0.25s");
    group.sample_size(10);
    for (label, workers) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(label), &workers, |b, &w| {
            b.iter(|| par::with_workers(w, || black_box(batch_loss_grad(&model, &items, &obj).unwrap().0)))
        });
    }
    group.finish();
}

criterion_group!(benches, render_batch, tcn_batch_grad);
criterion_main!(benches);
