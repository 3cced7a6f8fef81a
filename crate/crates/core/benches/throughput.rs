use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aste::corpus::Span;
use aste::encoder::EncoderConfig;
use aste::extraction::{encode_spans, SpanSets, TagLabel, Tagger};
use aste::matching::Matcher;
use aste::pairing::{build_compound, build_pairs, Ablation};
use aste::par::Exec;
use aste::tensor::{Gradients, ParamStore, Tape};

const VOCAB: usize = 200;

fn sentences(n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<TagLabel>)> {
    (0..n)
        .map(|_| {
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(8..VOCAB)).collect();
            let spans = SpanSets::new(vec![Span::single(1)], vec![Span::new(3, 4)]);
            (ids, encode_spans(&spans, len).unwrap())
        })
        .collect()
}

fn batch_gradients(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let tagger = Tagger::new(EncoderConfig::desk(VOCAB), &mut store, &mut rng).unwrap();
    let batch = sentences(8, 24, &mut rng);

    let mut group = c.benchmark_group("extraction_batch_gradients");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, &exec| {
                b.iter(|| {
                    let grads = exec.map(&batch, |_, (ids, labels)| {
                        let mut tape = Tape::new(&store);
                        let loss = tagger.loss(&mut tape, ids, labels, None).unwrap();
                        tape.backward(loss).unwrap()
                    });
                    let mut merged = Gradients::default();
                    for g in grads {
                        merged.merge(g);
                    }
                    black_box(merged)
                })
            },
        );
    }
    group.finish();
}

fn compound_vs_per_pair(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let matcher = Matcher::new(EncoderConfig::desk(VOCAB), &mut store, &mut rng).unwrap();
    let ids: Vec<usize> = (0..20).map(|_| rng.random_range(8..VOCAB)).collect();
    let spans = SpanSets::new(
        vec![Span::single(1), Span::single(6), Span::new(11, 12)],
        vec![Span::single(3), Span::single(8), Span::single(15)],
    );
    let pairs = build_pairs(&spans);
    let compound = build_compound(&ids, &spans, &pairs, 256, Ablation::None).unwrap();
    let solo: Vec<_> = pairs
        .iter()
        .map(|&p| build_compound(&ids, &spans, &[p], 256, Ablation::None).unwrap())
        .collect();

    let mut group = c.benchmark_group("pair_encoding_9_pairs");
    group.sample_size(20);
    group.bench_function("compound", |b| {
        b.iter(|| {
            for chunk in &compound {
                let mut tape = Tape::new(&store);
                black_box(matcher.forward(&mut tape, chunk, false, None).unwrap().1);
            }
        })
    });
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_function(format!("per_pair_{exec:?}"), |b| {
            b.iter(|| {
                exec.map(&solo, |_, chunks| {
                    let mut tape = Tape::new(&store);
                    let (_, d) = matcher.forward(&mut tape, &chunks[0], false, None).unwrap();
                    tape.value(d).clone()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, compound_vs_per_pair);
criterion_main!(benches);
