//! Throughput of the hot paths: filtering, preprocessing, CWT, the toy
//! model's forward/backward pass and FedAvg aggregation.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use ecgauth::beats::{detect_r_peaks, segment_beats, BeatSegment};
use ecgauth::data_io::synth_ecg;
use ecgauth::federated::{fedavg_aggregate, ClientUpdate};
use ecgauth::model::{build_model, forward, forward_graph, Mode};
use ecgauth::numerics::{Graph, Tensor};
use ecgauth::scalogram::{cwt_morlet, scalogram_image_sized};
use ecgauth::signal::{design_bandpass, preprocess, PreprocessConfig};
use ecgauth::{EcgRecord, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(beats: usize) -> EcgRecord {
    synth_ecg(2, beats, 500.0, 7).unwrap().records.remove(0)
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        n_classes: 5,
        input_size: 32,
        feature_dim: 64,
        gru_units: 32,
        fc_units: 32,
        backbone_width: 0.25,
        ..ModelConfig::default()
    }
}

fn batch(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * size * size).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![n, 3, size, size], data).unwrap()
}

fn beat() -> BeatSegment {
    let clean = preprocess(&record(20), &PreprocessConfig::default(), 1).unwrap();
    let peaks = detect_r_peaks(&clean, 0.5, 0.6).unwrap();
    segment_beats(&clean, &peaks, 250.0).unwrap().beats.remove(5)
}

fn signal(c: &mut Criterion) {
    let mut group = c.benchmark_group("signal");
    for beats in [50usize, 200] {
        let rec = record(beats);
        group.throughput(Throughput::Elements(rec.len() as u64));
        let spec = design_bandpass(0.5, 40.0, 4, rec.fs()).unwrap();
        group.bench_with_input(BenchmarkId::new("filtfilt", beats), &rec, |b, r| {
            b.iter(|| spec.filtfilt(black_box(r.samples())))
        });
        group.bench_with_input(BenchmarkId::new("preprocess", beats), &rec, |b, r| {
            b.iter(|| preprocess(black_box(r), &PreprocessConfig::default(), 3).unwrap())
        });
    }
    group.finish();
}

fn scalogram(c: &mut Criterion) {
    let seg = beat();
    let mut group = c.benchmark_group("scalogram");
    for scales in [32usize, 64] {
        group.bench_with_input(BenchmarkId::new("cwt", scales), &scales, |b, &s| {
            b.iter(|| cwt_morlet(black_box(&seg), s).unwrap())
        });
    }
    let coeffs = cwt_morlet(&seg, 64).unwrap();
    for size in [32usize, 224] {
        group.bench_with_input(BenchmarkId::new("image", size), &size, |b, &s| {
            b.iter(|| scalogram_image_sized(black_box(&coeffs), s).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let config = toy_model();
    let params = build_model(&config, 1).unwrap();
    let x = batch(16, 32, 2);
    let labels: Vec<usize> = (0..16).map(|i| i % 5).collect();
    let mut group = c.benchmark_group("model");
    group.throughput(Throughput::Elements(16));
    group.bench_function("forward_eval_16", |b| {
        b.iter(|| forward(&params, &config, black_box(&x), Mode::Eval).unwrap())
    });
    group.bench_function("forward_backward_16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let input = g.constant(x.clone());
            let pass = forward_graph(&mut g, &params, &config, input, Mode::Train, true, 5).unwrap();
            let loss = g.softmax_cross_entropy(pass.logits, &labels, None).unwrap();
            g.backward(loss).unwrap()
        })
    });
    group.finish();
}

fn federated(c: &mut Criterion) {
    let config = toy_model();
    let updates: Vec<ClientUpdate> = (0..3)
        .map(|k| ClientUpdate {
            client_id: k,
            params: build_model(&config, k as u64).unwrap(),
            n_samples: 100 + 50 * k,
        })
        .collect();
    c.bench_function("fedavg_3_clients", |b| {
        b.iter_batched(
            || updates.clone(),
            |u| fedavg_aggregate(&u).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, signal, scalogram, model, federated);
criterion_main!(benches);
