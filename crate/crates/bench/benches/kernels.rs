use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sidecar_core::objectives::{ctc_loss_with_grad, hungarian_assignment, pit_from_matrix, LogProbs};
use sidecar_core::sidecar::{init_sidecar, Embedding, SidecarConfig};

fn log_probs(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let row: Vec<f64> = (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - z));
    }
    out
}

fn ctc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("ctc_loss_with_grad");
    for frames in [64, 256] {
        let lp = log_probs(&mut rng, frames, 13);
        let target: Vec<usize> = (0..frames / 8).map(|i| 1 + i % 12).collect();
        group.bench_with_input(BenchmarkId::from_parameter(frames), &frames, |b, &frames| {
            b.iter(|| ctc_loss_with_grad(LogProbs::new(black_box(&lp), frames, 13).unwrap(), &target, 0).unwrap())
        });
    }
    group.finish();
}

fn pit(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("pit");
    for n in [2, 6, 12] {
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        group.bench_with_input(BenchmarkId::new("pit_from_matrix", n), &m, |b, m| {
            b.iter(|| pit_from_matrix(black_box(m.clone())).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("hungarian", n), &m, |b, m| {
            b.iter(|| hungarian_assignment(black_box(m)).unwrap())
        });
    }
    group.finish();
}

fn separator(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = SidecarConfig {
        num_speakers: 2,
        blocks_per_repeat: 4,
        repeats: 2,
        bottleneck_channels: 32,
        hidden_channels: Some(64),
        io_channels: 64,
        block_kernel: 3,
        norm: Default::default(),
        seed: 0,
    };
    let module = init_sidecar(cfg).unwrap();
    let frames = 128;
    let emb = Embedding::new(64, frames, (0..64 * frames).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    c.bench_function("forward_masks/toy", |b| b.iter(|| module.forward_masks(black_box(&emb)).unwrap()));
}

criterion_group!(benches, ctc, pit, separator);
criterion_main!(benches);
