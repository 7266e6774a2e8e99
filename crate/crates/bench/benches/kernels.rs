use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use soc_lab::adjoint::{solve_first_order_adjoint, solve_lean_adjoint, solve_second_order_adjoint};
use soc_lab::oracle::solve_riccati;
use soc_lab::simulate::{simulate_batch, simulate_path};
use soc_lab::train::msa_exact_step;
use soc_lab::{bam_loss, lean_am_loss};
use soc_lab_bench::{geometric_fixture, lq_fixture};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate_batch");
    for n_steps in [50, 200] {
        let (p, u, g) = lq_fixture(n_steps).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n_steps), &n_steps, |b, _| {
            b.iter(|| simulate_batch(&p, &u, &g, 1, black_box(256), 1).unwrap())
        });
    }
    group.finish();
}

fn adjoints(c: &mut Criterion) {
    let (p, u, g) = lq_fixture(200).unwrap();
    let tr = simulate_path(&p, &u, &g, 1, 1, 0).unwrap();
    c.bench_function("lean_adjoint/lq/200", |b| {
        b.iter(|| solve_lean_adjoint(&p, black_box(&tr)).unwrap())
    });
    let (p, u, g) = geometric_fixture(200).unwrap();
    let tr = simulate_path(&p, &u, &g, 1, 1, 0).unwrap();
    c.bench_function("first_order_adjoint/geometric/200", |b| {
        b.iter(|| solve_first_order_adjoint(&p, &u, black_box(&tr), None).unwrap())
    });
    let a = solve_first_order_adjoint(&p, &u, &tr, None).unwrap();
    c.bench_function("second_order_adjoint/geometric/200", |b| {
        b.iter(|| solve_second_order_adjoint(&p, &u, black_box(&tr), &a).unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let (p, u, g) = lq_fixture(50).unwrap();
    let batch = simulate_batch(&p, &u, &g, 1, 256, 1).unwrap();
    let lean: Vec<_> = batch.iter().map(|t| solve_lean_adjoint(&p, t).unwrap()).collect();
    let second: Vec<_> = batch
        .iter()
        .zip(&lean)
        .map(|(t, a)| solve_second_order_adjoint(&p, &u, t, a).unwrap())
        .collect();
    c.bench_function("lean_am_loss/lq/256x50", |b| {
        b.iter(|| lean_am_loss(&p, &u, black_box(&batch), &lean).unwrap())
    });
    c.bench_function("bam_loss/lq/256x50", |b| {
        b.iter(|| bam_loss(&p, &u, black_box(&batch), &lean, &second).unwrap())
    });
    c.bench_function("msa_exact_step/lq/256x50", |b| {
        b.iter(|| msa_exact_step(&p, &u, black_box(&batch), &lean).unwrap())
    });
    c.bench_function("solve_riccati/lq/50", |b| {
        b.iter(|| solve_riccati(&p, black_box(&g)).unwrap())
    });
}

criterion_group!(benches, forward, adjoints, losses);
criterion_main!(benches);
