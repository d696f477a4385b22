use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use merfuse::dataset::{
    decode_features, encode_features, gen_synthetic, gen_synthetic_videos, SyntheticSpec, VideoSpec,
};
use merfuse::evaluation::pooled_dims;
use merfuse::fusion::ParamSet;
use merfuse::numerics::cross_entropy;
use merfuse::prompt::{batch_loss_and_grad, EncoderConfig, FrozenEncoder, PromptBank, PromptConfig};
use merfuse::rng::seeded;
use merfuse::text_augment::{augment_transcript, MockBackend, RetryPolicy};
use merfuse::training::pool_all;
use merfuse::{train_fold, waf, FusionParams, Modality, TrainConfig};

fn bench_waf(c: &mut Criterion) {
    let n = 10_000;
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % 6).collect();
    let preds: Vec<usize> = (0..n).map(|i| (i * 5 + 1) % 6).collect();
    c.bench_function("waf_10k", |b| {
        b.iter(|| waf(black_box(&preds), black_box(&labels)).unwrap())
    });
}

fn bench_fusion(c: &mut Criterion) {
    let data = gen_synthetic(&SyntheticSpec::standard(), 0).unwrap();
    let pooled = pool_all(&data.labeled);
    let config = TrainConfig::default().fusion_config(pooled_dims(&pooled));
    let params = FusionParams::<f32>::init(&config, &mut seeded(0));
    let e = &pooled[0].embeddings;
    c.bench_function("fusion_forward_backward", |b| {
        b.iter(|| {
            let cache = params
                .forward_masked(black_box(e), [false, true, false, false], None, None)
                .unwrap();
            let (_, dl) = cross_entropy(&cache.logits, 2).unwrap();
            params.backward(&cache, &dl).unwrap().num_params()
        })
    });

    let (train, val) = pooled.split_at(240);
    let config = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_fold_240x5", |b| {
        b.iter(|| {
            train_fold(train, val, &config, pooled_dims(&pooled), 0)
                .unwrap()
                .best_epoch
        })
    });
    group.finish();
}

fn bench_prompt(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let encoder = FrozenEncoder::<f32>::new(&cfg).unwrap();
    let bank = PromptBank::<f32>::init(&cfg, &PromptConfig::default(), 0);
    let data = gen_synthetic_videos(&VideoSpec::default(), 0).unwrap();
    let frames: Vec<_> = data.labeled[..16]
        .iter()
        .map(|s| s.features[&Modality::Video].values.clone())
        .collect();
    let batch: Vec<_> = frames
        .iter()
        .zip(&data.labeled)
        .map(|(f, s)| (f, s.label.unwrap()))
        .collect();
    let mut group = c.benchmark_group("prompt");
    group.sample_size(20);
    group.bench_function("batch_loss_and_grad_16", |b| {
        b.iter(|| batch_loss_and_grad(&encoder, &bank, black_box(&batch), 0.07).unwrap().0)
    });
    group.bench_function("encoder_digest", |b| b.iter(|| encoder.digest()));
    group.finish();
}

fn bench_io(c: &mut Criterion) {
    let data = gen_synthetic(&SyntheticSpec::standard(), 0).unwrap();
    let values = &data.labeled[0].features[&Modality::Speech].values;
    let bytes = encode_features(values);
    c.bench_function("feature_encode", |b| b.iter(|| encode_features(black_box(values))));
    c.bench_function("feature_decode", |b| {
        b.iter_batched(
            || bytes.clone(),
            |v| decode_features(&v, Modality::Speech).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_augment(c: &mut Criterion) {
    let backend = MockBackend::new();
    c.bench_function("mock_augment", |b| {
        b.iter(|| {
            augment_transcript(
                black_box("I can't believe this happened | wow"),
                &backend,
                RetryPolicy::default(),
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, bench_waf, bench_fusion, bench_prompt, bench_io, bench_augment);
criterion_main!(benches);
