use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use embp_bench::block;
use embp_core::bp::run_bp;
use embp_core::em::{make_schedule, ScheduleKind};
use embp_core::model::build_matched_stats;
use embp_core::train::{gradient_estimate, GradientMode, ParamMask, SyntheticSpec};
use embp_core::{run_embp, trellis_map_detect, ChannelParams, Constellation, InitStrategy, Objective, TrainingSet};
use num_complex::Complex64;
use std::hint::black_box;

fn impulse(l: usize) -> ChannelParams {
    let mut h = vec![Complex64::new(0.0, 0.0); l + 1];
    h[0] = Complex64::new(1.0, 0.0);
    ChannelParams::new(h, 0.5).unwrap()
}

fn detectors(c: &mut Criterion) {
    let bpsk = Constellation::bpsk();
    let mut group = c.benchmark_group("detectors");
    for l in [2usize, 5] {
        let b = block(100, l, 10.0, 1);
        let stats = build_matched_stats(&b.truth, &b.observation).unwrap();
        let t = 3 * (l + 2);
        group.bench_with_input(BenchmarkId::new("bp", l), &l, |bench, _| {
            bench.iter(|| run_bp(black_box(&stats), &bpsk, &vec![1.0; t]).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("trellis_map", l), &l, |bench, _| {
            bench.iter(|| trellis_map_detect(black_box(&b.observation), &b.truth, &bpsk).unwrap())
        });
        let serial = make_schedule(ScheduleKind::Serial, t, l).unwrap();
        group.bench_with_input(BenchmarkId::new("embp_serial", l), &l, |bench, _| {
            bench.iter(|| run_embp(black_box(&b.observation), &bpsk, &serial, impulse(l), false).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let set = TrainingSet::synthetic(
        SyntheticSpec {
            block_len: 100,
            memory: 2,
            constellation: Constellation::bpsk(),
            snr_db: (6.0, 6.0),
            init: InitStrategy::GeniePerturbed { scale: 0.1 },
            seed: 1,
        },
        0,
    )
    .unwrap();
    let batch = set.batch(0, 16).unwrap();
    let schedule = make_schedule(ScheduleKind::Parallel, 3, 2).unwrap();
    let mask = ParamMask { em: true, bp: true };
    let mut group = c.benchmark_group("gradient_16_blocks");
    group.sample_size(10);
    group.bench_function("exact", |bench| {
        bench.iter(|| {
            gradient_estimate(&schedule, &batch, set.constellation(), Objective::MseH, GradientMode::Exact, mask, 0)
                .unwrap()
        })
    });
    group.bench_function("spsa", |bench| {
        let mode = GradientMode::Spsa { perturbation: 0.02, repeats: 4 };
        bench.iter(|| gradient_estimate(&schedule, &batch, set.constellation(), Objective::MseH, mode, mask, 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, detectors, training);
criterion_main!(benches);
