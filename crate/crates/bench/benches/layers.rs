use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use neutra::config::TrainConfig;
use neutra::diff::{Tape, Tensor};
use neutra::layers::{cheb_conv, init_cheb};
use neutra::mesh::{adjacency, build_laplacian};
use neutra::models::{Normalization, CHEB_ORDER};
use neutra::synthetic::template_mesh;
use neutra::training::{train_step, Batch, FacePair, TrainState};

fn cheb_conv_forward_backward(c: &mut Criterion) {
    let mesh = template_mesh(200).unwrap();
    let op = build_laplacian(&adjacency(&mesh)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = init_cheb(CHEB_ORDER, 16, 16, &mut rng);
    let x = Tensor::uniform([16, 200, 16], 1.0, &mut rng);
    c.bench_function("cheb_conv 16x200x16 fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let v = params.bind(&mut tape, true);
            let xv = tape.leaf(x.clone());
            let y = cheb_conv(&mut tape, xv, op.scaled(), &v).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap()
        })
    });
}

fn full_train_step(c: &mut Criterion) {
    let mesh = template_mesh(200).unwrap();
    let op = build_laplacian(&adjacency(&mesh)).unwrap();
    let config = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let state = TrainState::init(14, op, config.clone(), &mut rng).unwrap();
    let pair = FacePair {
        expressive: mesh.clone(),
        neutral: mesh.clone(),
        subject: "s".into(),
        expression: "e".into(),
    };
    let pairs: Vec<&FacePair> = vec![&pair; config.batch_size];
    let norm = Normalization::fit([&mesh]).unwrap();
    let batch = Batch::new(&pairs, (0..pairs.len()).map(|i| i % 14).collect(), &norm).unwrap();
    c.bench_function("train_step batch 16, n 200", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| train_step(&mut s, &batch).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = cheb_conv_forward_backward, full_train_step
}
criterion_main!(benches);
