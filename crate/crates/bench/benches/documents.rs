//! Chunking, embedding and retrieval timings.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use gridfm_core::doc::{chunk, DocumentIndex, HashingEmbedder};

fn corpus(bytes: usize) -> String {
    let sentence = "Protection relays on the feeder coordinate with upstream breakers during faults. ";
    sentence.repeat(bytes / sentence.len() + 1)[..bytes].to_string()
}

fn documents(c: &mut Criterion) {
    let text = corpus(200_000);
    let embedder = HashingEmbedder::default();
    let mut group = c.benchmark_group("documents");
    group.throughput(Throughput::Bytes(text.len() as u64));
    group.bench_function("chunk", |b| b.iter(|| chunk(black_box(&text), 1000, 200).unwrap()));
    group.bench_function("build_index", |b| {
        b.iter(|| DocumentIndex::build("bench", black_box(&text), &embedder, 1000, 200).unwrap())
    });
    group.finish();

    let index = DocumentIndex::build("bench", &text, &embedder, 1000, 200).unwrap();
    c.bench_function("documents/retrieve_top4", |b| {
        b.iter(|| index.retrieve(&embedder, black_box("How do relays coordinate with breakers?"), 4).unwrap())
    });
}

criterion_group!(benches, documents);
criterion_main!(benches);
