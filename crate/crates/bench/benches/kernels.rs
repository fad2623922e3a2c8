use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use unime_bench::{random_mask, random_tensor};
use unime_core::autograd::{Ctx, Tape};
use unime_core::evaluation::{hd95, EvalConfig};
use unime_core::params::ParamStore;

fn conv3d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    for (cin, cout, side) in [(1, 16, 16), (16, 16, 16), (32, 64, 8)] {
        let x = random_tensor(&[cin, side, side, side], 1);
        let w = random_tensor(&[cout, cin, 3, 3, 3], 2);
        let store = ParamStore::<f32>::new();
        group.bench_with_input(BenchmarkId::new("forward", format!("{cin}x{cout}@{side}")), &(), |b, _| {
            b.iter(|| {
                let tape = Tape::inference();
                let cx = Ctx::new(&tape, &store);
                cx.constant(x.clone()).conv3d(cx.constant(w.clone()), 1, 1).value()
            })
        });
        group.bench_with_input(BenchmarkId::new("backward", format!("{cin}x{cout}@{side}")), &(), |b, _| {
            b.iter(|| {
                let tape = Tape::training();
                let y = tape.input(x.clone()).conv3d(tape.input(w.clone()), 1, 1).mean_all();
                tape.backward(y)
            })
        });
    }
    group.finish();
}

fn surface_distance(c: &mut Criterion) {
    let mut group = c.benchmark_group("hd95");
    let cfg = EvalConfig::default();
    let edt = EvalConfig {
        brute_force_limit: 0,
        ..EvalConfig::default()
    };
    for side in [16usize, 32] {
        let a = random_mask(side, 0.6, 1);
        let b = random_mask(side, 0.5, 2);
        let dims = [side; 3];
        group.bench_function(BenchmarkId::new("brute_force", side), |bch| {
            bch.iter(|| hd95(&a, &b, dims, [1.0; 3], &cfg).unwrap())
        });
        group.bench_function(BenchmarkId::new("distance_transform", side), |bch| {
            bch.iter(|| hd95(&a, &b, dims, [1.0; 3], &edt).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv3d, surface_distance);
criterion_main!(benches);
