//! One worker against the default rayon pool on the two hottest parallel
//! paths: lead-field assembly and a chunked CNN gradient.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng as _;
use sourcespace::nn::{Family, InputShape, Model, ModelSpec};
use sourcespace::seed;
use sourcespace::sim::{build_sensor_array, build_template_anatomy, compute_lead_field};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    let n = all.current_num_threads();
    vec![
        ("one thread".into(), one),
        (format!("default pool ({n})"), all),
    ]
}

fn lead_field(c: &mut Criterion) {
    let anatomy = build_template_anatomy(10.0, 75.0, 1).unwrap();
    let sensors = build_sensor_array("bench", 102, 110.0, 75.0, 1).unwrap();
    let mut g = c.benchmark_group("lead_field");
    for (name, pool) in pools() {
        g.bench_function(&name, |b| {
            pool.install(|| b.iter(|| compute_lead_field(black_box(&anatomy), &sensors).unwrap()))
        });
    }
    g.finish();
}

fn cnn_gradient(c: &mut Criterion) {
    let spec = ModelSpec::new(
        Family::CnnSe,
        InputShape::Dense { dims: [6, 8, 6] },
        vec!["a".into()],
    )
    .with_width(8);
    let mut model = Model::build(spec, 0).unwrap();
    let n = 64;
    let mut rng = seed::rng(0);
    let x: Vec<f64> = (0..n * model.sample_len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let s = vec![Some(0); n];
    let mut g = c.benchmark_group("cnn_loss_and_grad");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(&name, |b| {
            pool.install(|| b.iter(|| model.loss_and_grad(black_box(&x), &y, &s, 0).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, lead_field, cnn_gradient);
criterion_main!(benches);
