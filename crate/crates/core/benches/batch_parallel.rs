//! Sequential vs rayon execution of the per-sample batch kernels.

use std::hint::black_box;

use attendout::models::{
    batch_loss_and_grads, gnet_sample_masks, GeneratorConfig, GeneratorParams, MaskDecision,
    TaskConfig, TaskModelParams,
};
use attendout::numkernel::RngState;
use attendout::par::Execution;
use attendout::policygrad::reinforce_gradient;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const LEN: usize = 17;
const LAYERS: usize = 3;

fn modes() -> Vec<(&'static str, Execution)> {
    vec![
        ("sequential", Execution::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Execution::Parallel),
    ]
}

fn batch(n: usize, rng: &mut RngState) -> (Vec<Vec<usize>>, Vec<usize>) {
    let tokens = (0..n)
        .map(|_| (0..LEN).map(|_| rng.below(6)).collect())
        .collect();
    let labels = (0..n).map(|_| rng.below(2)).collect();
    (tokens, labels)
}

fn task_grads(c: &mut Criterion) {
    let cfg = TaskConfig {
        vocab_size: 6,
        max_len: LEN,
        d_model: 16,
        d_ff: 32,
        num_heads: 2,
        num_layers: LAYERS,
        num_classes: 2,
    };
    let params = TaskModelParams::init(&cfg, 1).unwrap();
    let mut group = c.benchmark_group("task_batch_grads");
    for n in [16, 64] {
        let (tokens, labels) = batch(n, &mut RngState::new(1, 1));
        let refs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| black_box(batch_loss_and_grads(&params, &refs, &labels, None, exec).unwrap()))
            });
        }
    }
    group.finish();
}

fn generator_grads(c: &mut Criterion) {
    let g = GeneratorParams::init(
        &GeneratorConfig {
            vocab_size: 6,
            d_model: 8,
            temperature: 1.0,
            logit_offset: 0.0,
        },
        2,
    )
    .unwrap();
    let mut rng = RngState::new(2, 1);
    let mut group = c.benchmark_group("reinforce_gradient");
    for n in [16, 160] {
        let (tokens, _) = batch(n, &mut rng);
        let masks: Vec<MaskDecision> = tokens
            .iter()
            .map(|t| gnet_sample_masks(&g, t, LAYERS, &mut rng).unwrap())
            .collect();
        let pairs: Vec<(&[usize], &MaskDecision)> =
            tokens.iter().map(Vec::as_slice).zip(&masks).collect();
        let rewards: Vec<f64> = (0..n).map(|i| (i % 5) as f64 * 0.1).collect();
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| black_box(reinforce_gradient(&g, &pairs, &rewards, 0.2, exec).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, task_grads, generator_grads);
criterion_main!(benches);
