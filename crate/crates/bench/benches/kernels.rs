use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cress_bench::{filled, fixture};
use cress_core::analysis::{corpus_bleu, Smoothing};
use cress_core::data::make_batches;
use cress_core::decoding::{beam_decode, greedy_decode, BeamConfig};
use cress_core::model::{DropoutStream, Graph, ModelInput};
use cress_core::tensor::matmul;
use cress_core::training::{mtl_loss, TrainConfig};
use cress_core::{Tape, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for rows in [16usize, 64, 256] {
        let a = Tensor::matrix(rows, 64, filled(rows * 64, 1)).unwrap();
        let w = Tensor::matrix(64, 256, filled(64 * 256, 2)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(rows), &rows, |b, _| {
            b.iter(|| matmul(black_box(&a), black_box(&w), false).unwrap())
        });
    }
    group.finish();
}

fn bench_forward_backward(c: &mut Criterion) {
    let f = fixture(8);
    let ex = &f.examples[0];
    let src = ex.x.encoder_input();
    let prefix = ex.y.decoder_prefix().ids;
    c.bench_function("text_forward_backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let g = Graph::new(&f.model, &tape);
            let off = DropoutStream::off();
            let enc = g.encode(ModelInput::Text(&src), &off).unwrap();
            let (_, lp) = g.decode(enc, &prefix, &off).unwrap();
            let loss = lp.smoothed_nll(&ex.y.decoder_targets(), 0.1).unwrap().sum();
            tape.backward(loss).unwrap()
        })
    });
}

fn bench_mtl_batch(c: &mut Criterion) {
    let f = fixture(32);
    let batches = make_batches(&f.examples, 160, 3200, 1).unwrap();
    let cfg = TrainConfig::default();
    c.bench_function("mtl_loss_batch", |b| {
        b.iter(|| mtl_loss(&f.model, black_box(&batches[0]), &cfg, 3).unwrap())
    });
}

fn bench_decoding(c: &mut Criterion) {
    let f = fixture(4);
    let ex = &f.examples[0];
    let max_len = Some(ex.y.len() + 1);
    c.bench_function("greedy_speech", |b| {
        b.iter(|| greedy_decode(&f.model, ModelInput::Speech(&ex.s), max_len).unwrap())
    });
    let cfg = BeamConfig {
        max_len,
        ..BeamConfig::default()
    };
    c.bench_function("beam8_speech", |b| {
        b.iter(|| beam_decode(&f.model, ModelInput::Speech(&ex.s), &cfg).unwrap())
    });
}

fn bench_bleu(c: &mut Criterion) {
    let f = fixture(200);
    let refs: Vec<Vec<usize>> = f.examples.iter().map(|e| e.y.ids.clone()).collect();
    let hyps: Vec<Vec<usize>> = f.examples.iter().map(|e| e.x.ids.clone()).collect();
    c.bench_function("corpus_bleu_200", |b| {
        b.iter(|| corpus_bleu(black_box(&hyps), &refs, Smoothing::Exp).unwrap())
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_forward_backward,
    bench_mtl_batch,
    bench_decoding,
    bench_bleu
);
criterion_main!(benches);
