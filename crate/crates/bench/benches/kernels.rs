//! Microbenchmarks for the kernels the training loops live in.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use icrl_core::datagen::{make_darkroom_corpus, EncodingSpec, Scheme};
use icrl_core::env::{DarkroomTask, EnvSpec, GridPos, TaskFamily};
use icrl_core::nn::tensor::{matmul, matmul_nt};
use icrl_core::nn::Tensor;
use icrl_core::policy::{policy_loss, Policy, PolicyConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for &(n, k, m) in &[(102usize, 206usize, 32usize), (102, 32, 96), (128, 128, 128)] {
        let a = Tensor::randn(vec![n, k], 1.0, &mut rng);
        let b = Tensor::randn(vec![k, m], 1.0, &mut rng);
        group.throughput(Throughput::Elements((n * k * m) as u64));
        group.bench_function(format!("{n}x{k}x{m}"), |bench| {
            bench.iter(|| matmul(&a, &b).unwrap())
        });
    }
    group.finish();
}

fn bench_attention_scores(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = Tensor::randn(vec![102, 16], 1.0, &mut rng);
    let k = Tensor::randn(vec![102, 16], 1.0, &mut rng);
    c.bench_function("attention_scores_102x16", |bench| {
        bench.iter(|| matmul_nt(&q, &k).unwrap())
    });
}

fn bench_darkroom_rollout(c: &mut Criterion) {
    let task = DarkroomTask::new(10, 10, GridPos::new(3, 7), 0.0, 100);
    c.bench_function("darkroom_rollout_100", |bench| {
        bench.iter_batched(
            || ChaCha8Rng::seed_from_u64(7),
            |mut rng| icrl_core::datagen::collect_random_rollout(&task, 100, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_policy_training_step(c: &mut Criterion) {
    let spec = EnvSpec {
        horizon: 100,
        ..EnvSpec::for_family(TaskFamily::Darkroom)
    };
    let corpus = make_darkroom_corpus(&spec, 100, 0).unwrap();
    let encoding = EncodingSpec::for_env(&spec, Scheme::Onehot);
    let config = PolicyConfig::new(encoding, Variant::Dpt, 100);
    let mut policy = Policy::new(config, 0).unwrap();
    let indices: Vec<usize> = (0..8).collect();
    c.bench_function("dpt_fwd_bwd_batch8_h100", |bench| {
        bench.iter_batched(
            || ChaCha8Rng::seed_from_u64(3),
            |mut rng| policy_loss(&mut policy, &corpus, &indices, None, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_attention_scores,
    bench_darkroom_rollout,
    bench_policy_training_step
);
criterion_main!(benches);
