//! Wall-clock benchmarks for the training hot paths: teacher-forced
//! policy forward/backward, Euler image sampling, and autoregressive
//! rollout decoding.

use criterion::{criterion_group, criterion_main, Criterion};

use cogen_bench::{sample_ids, stack};
use cogen_core::numerics::{Tape, Tensor};

fn policy_forward_backward(c: &mut Criterion) {
    let models = stack(7);
    let ids = sample_ids(128);
    c.bench_function("policy_fwd_bwd_128", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = models.policy.params.bind(&mut tape);
            let (logits, _) = models.policy.forward_on(&mut tape, &bound, &ids).unwrap();
            let targets: Vec<usize> = ids[1..].iter().map(|&i| i as usize).collect();
            let head = tape.slice_rows(logits, 0, targets.len()).unwrap();
            let lp = tape.gather_log_softmax(head, &targets).unwrap();
            let m = tape.mean(lp).unwrap();
            let loss = tape.mul_scalar(m, -1.0).unwrap();
            tape.backward(loss).unwrap();
        })
    });
}

fn decoder_euler_sample(c: &mut Criterion) {
    let models = stack(7);
    let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(3);
    let cond = Tensor::<f32>::randn(vec![16, 64], 1.0, &mut rng);
    c.bench_function("decoder_euler_8", |b| {
        b.iter(|| models.decoder.sample_image(&cond, 8, 11).unwrap())
    });
}

fn rollout_decode(c: &mut Criterion) {
    let models = stack(7);
    let prompt = sample_ids(64);
    c.bench_function("policy_sample_64new", |b| {
        b.iter(|| models.policy.sample(&prompt, 1.0, 0, 64, 5).unwrap())
    });
}

criterion_group!(
    benches,
    policy_forward_backward,
    decoder_euler_sample,
    rollout_decode
);
criterion_main!(benches);
