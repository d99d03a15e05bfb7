use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use biascl::memory::ExemplarMemory;
use biascl::metrics::{bmr, cka_linear, HeadPredictor};
use biascl::nn::loss::CrossEntropy;
use biascl::nn::{train_step, AdamWConfig, AdamWState, Gate};
use biascl::seed::{Purpose, SeedStreams};
use biascl::stream::{to_batch, Preset};
use biascl_bench::{inputs, model, stream};

fn nn(c: &mut Criterion) {
    let s = stream(Preset::TwoTaskForward, 250);
    let dim = s.feature_dim();
    let samples: Vec<_> = s.train[0].iter().take(32).collect();
    let batch = to_batch(&samples).unwrap();
    let routing = s.routing();

    let m = model(dim, &[64, 64]);
    c.bench_function("forward_b32_h64x2", |b| {
        b.iter(|| m.forward_batch(black_box(&batch), 0).unwrap())
    });

    let objective = CrossEntropy {
        routing: routing.clone(),
        train_trunk: true,
    };
    c.bench_function("train_step_b32_h64x2", |b| {
        b.iter_batched(
            || {
                let m = model(dim, &[64, 64]);
                let st = AdamWState::new(&m, AdamWConfig::default());
                let gates = vec![Gate::Train; m.tensor_count()];
                (m, st, gates)
            },
            |(mut m, mut st, gates)| train_step(&mut m, &mut st, &batch, &objective, &gates).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn samplers(c: &mut Criterion) {
    let s = stream(Preset::RandomLevels, 100);
    let seeds = SeedStreams::new(0);
    c.bench_function("reservoir_k100_n2000", |b| {
        b.iter_batched(
            || ExemplarMemory::new(100, 2, seeds.rng(Purpose::Eviction)),
            |mut mem| {
                let mut seen = 0;
                for task in &s.train {
                    for x in task {
                        seen += 1;
                        mem.reservoir_update(x.clone(), seen).unwrap();
                    }
                }
                mem
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("bgs_k100_n2000", |b| {
        b.iter_batched(
            || ExemplarMemory::new(100, 2, seeds.rng(Purpose::Eviction)),
            |mut mem| {
                for (t, task) in s.train.iter().enumerate() {
                    for x in task {
                        mem.bgs_update(x.clone(), t);
                    }
                }
                mem
            },
            BatchSize::SmallInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let x = inputs(500, 64);
    let y = inputs(500, 64).mapv(|v| v * v);
    c.bench_function("cka_linear_500x64", |b| {
        b.iter(|| cka_linear(black_box(x.view()), black_box(y.view())).unwrap())
    });

    let s = stream(Preset::TwoTaskForward, 250);
    let m = model(s.feature_dim(), &[64, 64]);
    let routing = s.routing();
    let predictor = HeadPredictor {
        model: &m,
        routing: &routing,
        task: 0,
    };
    let pairs: Vec<_> = s.test[0].iter().map(|p| (&p.original, &p.flipped[0])).collect();
    c.bench_function("bmr_200_pairs", |b| b.iter(|| bmr(&predictor, black_box(&pairs)).unwrap()));
}

criterion_group!(benches, nn, samplers, metrics);
criterion_main!(benches);
