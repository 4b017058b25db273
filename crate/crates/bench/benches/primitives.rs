use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use nalgebra::DVector;
use spppot_bench::{random_function, random_vectors, warm_toy_state};
use spppot_core::{komp_prune, spppot_step, HessianState};

fn komp(c: &mut Criterion) {
    let mut g = c.benchmark_group("komp_prune");
    for n in [50, 100, 200] {
        let z = random_function(n, 7);
        g.bench_with_input(BenchmarkId::from_parameter(n), &z, |b, z| {
            b.iter(|| komp_prune(z, 1e-3).unwrap())
        });
    }
    g.finish();
}

fn sherman_morrison(c: &mut Criterion) {
    let mut g = c.benchmark_group("sherman_morrison");
    for dim in [50, 100, 441] {
        let vs: Vec<DVector<f64>> = random_vectors(dim, 16, 3).into_iter().map(DVector::from_vec).collect();
        let h0 = HessianState::new(dim, 1.0).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(dim), &vs, |b, vs| {
            b.iter_batched(
                || h0.clone(),
                |mut h| {
                    for v in vs {
                        h.sherman_morrison_update(v).unwrap();
                    }
                    h
                },
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn spppot(c: &mut Criterion) {
    let (model, state, rest) = warm_toy_state(200);
    let batch = &rest[..30];
    c.bench_function("spppot_step/toy_batch30", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| spppot_step(&mut s, batch, &model).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, komp, sherman_morrison, spppot);
criterion_main!(benches);
