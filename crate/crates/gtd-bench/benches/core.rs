//! Hot-path benchmarks: the eval-mode forward pass, one optimizer step,
//! reverse-diffusion sampling for a single sequence, and metric scoring.

use criterion::{criterion_group, criterion_main, Criterion};
use gtd_bench::{bench_diffusion, bench_gtan, bench_trainer};
use gtd_core::diffusion::{sample_many, GtanDenoiser};
use gtd_core::gtan::{gtan_forward, ForwardInput};
use gtd_core::metrics::{evaluate_samples, mfss_one};
use gtd_core::{NoiseSchedule, ReconstructionMap, Tensor};
use std::hint::black_box;

fn forward_pass(c: &mut Criterion) {
    let (trainer, items) = bench_trainer();
    let gtan = bench_gtan();
    let frames = items[0].split.total();
    let zeros = Tensor::zeros(&[frames, gtan.num_classes]);
    c.bench_function("forward_pass", |b| {
        b.iter(|| {
            let input = ForwardInput {
                noisy: black_box(&zeros),
                self_cond: &zeros,
                cond: &items[0].cond,
                step: Some(25),
            };
            gtan_forward(&trainer.params, &gtan, &input, false).unwrap()
        })
    });
}

fn training_step(c: &mut Criterion) {
    let (mut trainer, items) = bench_trainer();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("training_step", |b| {
        b.iter(|| trainer.run_steps(black_box(&items), 1, |_, _| {}).unwrap())
    });
    group.finish();
}

fn ddim_sample(c: &mut Criterion) {
    let (trainer, items) = bench_trainer();
    let gtan = bench_gtan();
    let diffusion = bench_diffusion();
    let schedule = NoiseSchedule::new(diffusion.schedule, diffusion.t_max).unwrap();
    let denoiser = GtanDenoiser {
        params: &trainer.params,
        config: &gtan,
        map: ReconstructionMap::Identity,
    };
    let mut group = c.benchmark_group("sample");
    group.sample_size(10);
    group.bench_function("ddim_sequence", |b| {
        b.iter(|| {
            sample_many(
                &denoiser,
                black_box(&items[0].cond),
                &diffusion,
                &schedule,
                1,
                42,
            )
            .unwrap()
        })
    });
    group.finish();
}

fn score_metrics(c: &mut Criterion) {
    let frames = 512;
    let gt: Vec<usize> = (0..frames).map(|i| (i / 37) % 7).collect();
    let samples: Vec<Vec<usize>> = (0..25)
        .map(|m| (0..frames).map(|i| ((i + m) / 41) % 7).collect())
        .collect();
    c.bench_function("score_25_samples", |b| {
        b.iter(|| {
            let (mean, best) =
                evaluate_samples(black_box(&samples), &gt, 128..frames).unwrap();
            let mfss = mfss_one(&samples, 128..frames).unwrap();
            (mean, best, mfss)
        })
    });
}

criterion_group!(benches, forward_pass, training_step, ddim_sample, score_metrics);
criterion_main!(benches);
