use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use invtrans_core::numerics::gaussian;
use invtrans_core::objective::{joint_step_losses, Batch, ObjectiveConfig};
use invtrans_core::swd::{swd_grad_with, swd_with, Projections};
use invtrans_core::{CouplingLayer, DimSpec, InnModel, LossWeights, RngState};

fn coupling(c: &mut Criterion) {
    let mut rng = RngState::new(1);
    let layer = CouplingLayer::new(256, 64, 2.0, &mut rng).unwrap();
    let u = gaussian(&mut rng, 64, 256, 1.0).unwrap();
    let (v, _) = layer.forward(&u).unwrap();
    c.bench_function("coupling_forward_64x256", |b| {
        b.iter(|| layer.forward(black_box(&u)).unwrap())
    });
    c.bench_function("coupling_inverse_64x256", |b| {
        b.iter(|| layer.inverse(black_box(&v)).unwrap())
    });
}

fn swd(c: &mut Criterion) {
    let mut rng = RngState::new(2);
    let a = gaussian(&mut rng, 64, 144, 1.0).unwrap();
    let b = gaussian(&mut rng, 64, 144, 1.0).unwrap();
    let proj = Projections::draw(&mut rng, 128, 144).unwrap();
    c.bench_function("swd_64x144_m128", |bch| {
        bch.iter(|| swd_with(black_box(&a), &b, &proj).unwrap())
    });
    c.bench_function("swd_grad_64x144_m128", |bch| {
        bch.iter(|| swd_grad_with(black_box(&a), &b, &proj).unwrap())
    });
}

fn joint_step(c: &mut Criterion) {
    let spec = DimSpec::default();
    let mut rng = RngState::new(3);
    let model = InnModel::new(spec, 5, 64, 2.0, &mut rng).unwrap();
    let batch = Batch::new(
        gaussian(&mut rng, 64, spec.d_x, 1.0).unwrap(),
        gaussian(&mut rng, 64, spec.d_y, 1.0).unwrap(),
    )
    .unwrap();
    let cfg = ObjectiveConfig::default();
    let w = LossWeights::default();
    let mut group = c.benchmark_group("training");
    group.sample_size(20);
    group.bench_function("joint_step_default_batch64", |b| {
        b.iter(|| joint_step_losses(&model, &batch, &w, &cfg, &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, coupling, swd, joint_step);
criterion_main!(benches);
