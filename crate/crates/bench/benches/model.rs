use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use hoistlab_core::config::RunConfig;
use hoistlab_core::data::{synth_dataset, Split};
use hoistlab_core::model::Model;

fn bench_model(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let ds = synth_dataset(&cfg.data.synth, 1, Split::Train).unwrap();
    let model = Model::new(&cfg, 0).unwrap();
    let entry = &ds.clips[0];
    let loss = cfg.loss.loss_config();
    let targets = model.targets(entry, &loss).unwrap();

    let mut group = c.benchmark_group("default model, 4x96x96 clip");
    group.sample_size(20);
    group.bench_function("forward", |b| b.iter(|| model.forward(black_box(&entry.clip)).unwrap()));
    group.bench_function("training step", |b| {
        b.iter(|| model.step(black_box(&entry.clip), &targets, &loss).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_model);
criterion_main!(benches);
