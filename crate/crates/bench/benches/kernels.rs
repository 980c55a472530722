use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use tcm_bench::{gaussian, network, ring8, tcm_batch};
use tcm_core::metrics;
use tcm_core::oracle;
use tcm_core::train::loss::{tcm_step_loss_on, value_and_grad};

fn matmul(c: &mut Criterion) {
    let a = gaussian(256, 64, 1);
    let b = gaussian(64, 64, 2);
    c.bench_function("matmul_256x64x64", |bn| {
        bn.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let data = ring8();
    let (cfg, params) = network();
    let batch = tcm_batch(&cfg, &data);
    let loss_cfg = cfg.loss_config();
    let t_min = cfg.noise.t_min;
    c.bench_function("tcm_loss_value_and_grad", |bn| {
        bn.iter(|| {
            value_and_grad(&params, |tape, pv| {
                let frozen = params.register_const(tape);
                let teacher = pv.clone();
                Ok(tcm_step_loss_on(
                    tape, &params, pv, &teacher, &frozen, &batch, &loss_cfg, t_min,
                )?
                .total)
            })
            .unwrap()
        })
    });
}

fn score(c: &mut Criterion) {
    let data = ring8();
    let x = gaussian(256, 2, 3);
    let t = vec![0.5; 256];
    c.bench_function("exact_score_256_vs_2048", |bn| {
        bn.iter(|| oracle::score_batch(black_box(&x), &t, &data).unwrap())
    });
}

fn wasserstein(c: &mut Criterion) {
    let mut g = c.benchmark_group("w2");
    g.sample_size(10);
    let (a, b) = (gaussian(512, 2, 4), gaussian(512, 2, 5));
    g.bench_function("exact_512", |bn| {
        bn.iter(|| metrics::w2_exact(&a, &b).unwrap())
    });
    let (a, b) = (gaussian(4096, 2, 4), gaussian(4096, 2, 5));
    g.bench_function("sliced_4096", |bn| {
        bn.iter_batched(
            || (a.clone(), b.clone()),
            |(a, b)| metrics::w2_sliced(&a, &b).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, matmul, training_step, score, wasserstein);
criterion_main!(benches);
