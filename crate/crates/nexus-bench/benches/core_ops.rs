//! Criterion benchmarks for the hot paths: matmul forward/backward, a dense
//! training step, the routed-layer forward, router projection and routing,
//! and the data pipeline (tokenizer and batch sampler).

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use nexus_bench::{dense_with_batch, randn, routed_layer, sampler, small_corpora};
use nexus_core::data::{tokenize, Batch};
use nexus_core::moe::{moe_forward, project_domains, route_nexus, Router};
use nexus_core::{Tape, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let a: Tensor<f32> = randn(vec![256, 64], 1.0, 1);
    let b: Tensor<f32> = randn(vec![64, 64], 1.0, 2);
    let mut group = c.benchmark_group("matmul_256x64x64");
    group.throughput(Throughput::Elements((256 * 64 * 64) as u64));
    group.bench_function("forward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let ai = tape.constant(&a);
            let bi = tape.constant(&b);
            let y = tape.matmul(ai, bi).expect("shapes agree");
            black_box(tape.value(y).data()[0])
        })
    });
    group.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let ai = tape.param(&a);
            let bi = tape.param(&b);
            let y = tape.matmul(ai, bi).expect("shapes agree");
            let loss = tape.sum_all(y).expect("scalar");
            tape.backward(loss).expect("connected graph");
            black_box(tape.grad(ai).expect("param grad")[0])
        })
    });
    group.finish();
}

fn bench_dense_step(c: &mut Criterion) {
    let (model, tokens, targets) = dense_with_batch(4, 64);
    let batch = Batch {
        tokens,
        targets,
        labels: vec!["bench".into(); 4],
        batch: 4,
        seq: 64,
    };
    let mut group = c.benchmark_group("dense_model");
    group.sample_size(20);
    group.throughput(Throughput::Elements((4 * 64) as u64));
    group.bench_function("loss_forward_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let loss = bound.loss(&mut tape, &batch).expect("valid batch");
            tape.backward(loss).expect("connected graph");
            black_box(tape.value(loss).data()[0])
        })
    });
    group.finish();
}

fn bench_routed_layer(c: &mut Criterion) {
    let layer = routed_layer(4, 64, 1);
    let x: Tensor<f32> = randn(vec![8, 64, 64], 1.0, 3);
    let mut group = c.benchmark_group("routed_layer_4x64");
    group.sample_size(30);
    group.throughput(Throughput::Elements((8 * 64) as u64));
    group.bench_function("forward_top1", |bench| {
        bench.iter(|| {
            let (y, decision) = moe_forward(&layer, &x).expect("valid layer");
            black_box((y.data()[0], decision.top_indices[0]))
        })
    });
    group.finish();
}

fn bench_router(c: &mut Criterion) {
    let layer = routed_layer(4, 64, 1);
    let Router::DomainProjection(state) = &layer.router else {
        unreachable!("fixture uses the projection router")
    };
    let mut cached = state.clone();
    cached.refresh_cache().expect("valid projection");
    let x: Tensor<f32> = randn(vec![8, 64, 64], 1.0, 4);
    let mut group = c.benchmark_group("router");
    group.bench_function("project_domains_4x64", |bench| {
        bench.iter(|| black_box(project_domains(state).expect("valid projection").data()[0]))
    });
    group.throughput(Throughput::Elements((8 * 64) as u64));
    group.bench_function("route_512_tokens_cached", |bench| {
        bench.iter(|| {
            let d = route_nexus(&cached, &x, 1).expect("valid shapes");
            black_box(d.top_indices[0])
        })
    });
    group.bench_function("route_512_tokens_uncached", |bench| {
        bench.iter(|| {
            let d = route_nexus(state, &x, 1).expect("valid shapes");
            black_box(d.top_indices[0])
        })
    });
    group.finish();
}

fn bench_data(c: &mut Criterion) {
    let corpora = small_corpora();
    let doc = corpora.domains[0].docs.join(" ");
    let mut group = c.benchmark_group("data");
    group.throughput(Throughput::Bytes(doc.len() as u64));
    group.bench_function("tokenize", |bench| {
        bench.iter(|| black_box(tokenize(&doc).len()))
    });
    let mut s = sampler(&corpora, 8, 64);
    group.throughput(Throughput::Elements((8 * 64) as u64));
    group.bench_function("next_batch_8x64", |bench| {
        bench.iter(|| black_box(s.next_batch().tokens[0]))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_dense_step,
    bench_routed_layer,
    bench_router,
    bench_data
);
criterion_main!(benches);
