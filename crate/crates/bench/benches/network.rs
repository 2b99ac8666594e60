use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mk_core::train::{RunConfig, Task, Trainer};

fn forward(c: &mut Criterion) {
    let cfg = RunConfig::preset(Task::Classify);
    let model = cfg.build_model::<f32>().unwrap();
    let data = cfg.generate(0, 8).unwrap();
    let mk_core::io::Dataset::Classify(items) = &data else {
        unreachable!()
    };
    let images: Vec<_> = items.iter().map(|s| s.image.clone()).collect();
    let x = mk_core::tasks::stack_images::<f32>(&images).unwrap();
    c.bench_function("classify preset forward, batch 8", |b| {
        b.iter(|| model.predict(black_box(&x)).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train step");
    group.sample_size(10);
    for task in [Task::Classify, Task::Detect] {
        let cfg = RunConfig::preset(task);
        let data = cfg.generate(0, cfg.batch_size).unwrap();
        let idx: Vec<usize> = (0..cfg.batch_size).collect();
        let mut trainer = Trainer::<f32>::new(&cfg).unwrap();
        group.bench_function(task.name(), |b| b.iter(|| trainer.train_batch(&data, &idx).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);
