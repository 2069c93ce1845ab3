//! Criterion benchmarks for the hot numeric kernels.

use std::hint::black_box;

use criterion::{BenchmarkId, Criterion, Throughput};
use glyphshot::augment::AugmentationPipeline;
use glyphshot::classifiers::{knn_fit, knn_predict, SupportSet};
use glyphshot::encoder::{vicreg_loss_with_grad, Encoder, EncoderConfig, VicRegConfig};
use glyphshot::preprocess::{extract_crops, BinarizationParams, CropScanParams, ManuscriptPage};
use glyphshot::{seed, synthetic};
use ndarray::Array2;

fn pseudo_random(rows: usize, cols: usize, salt: u64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let h = seed::derive(salt, &[i as u64, j as u64]);
        (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    })
}

pub fn knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn_predict");
    for m in [50usize, 200] {
        let features = pseudo_random(m, 1600, 1).mapv(|v| v as f32);
        let labels = (0..m).map(|i| i % 10).collect();
        let set = SupportSet::originals(features, labels).unwrap();
        let model = knn_fit(&set, 5, 10).unwrap();
        let queries = pseudo_random(100, 1600, 2).mapv(|v| v as f32);
        group.throughput(Throughput::Elements(100));
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| knn_predict(&model, black_box(queries.view())).unwrap())
        });
    }
    group.finish();
}

pub fn vicreg(c: &mut Criterion) {
    let cfg = VicRegConfig::default();
    let za = pseudo_random(64, 2048, 3);
    let zb = pseudo_random(64, 2048, 4);
    c.bench_function("vicreg_loss_with_grad/64x2048", |b| {
        b.iter(|| vicreg_loss_with_grad(black_box(&za), black_box(&zb), &cfg).unwrap())
    });
}

pub fn encoder(c: &mut Criterion) {
    let encoder = Encoder::new(EncoderConfig::default(), 5).unwrap();
    let crops: Vec<_> = (0..32).map(|i| synthetic::shape_glyph(i % synthetic::SHAPE_COUNT, i as u64)).collect();
    let mut group = c.benchmark_group("encoder_forward");
    group.throughput(Throughput::Elements(crops.len() as u64));
    group.bench_function("32_crops", |b| b.iter(|| encoder.forward(black_box(&crops)).unwrap()));
    group.finish();
}

pub fn preprocessing(c: &mut Criterion) {
    let page = ManuscriptPage::new("bench", synthetic::synthetic_page(512, 512, 8, 40, 6), "bench.png").unwrap();
    let (bin, scan) = (BinarizationParams::default(), CropScanParams::default());
    c.bench_function("extract_crops/512x512", |b| {
        b.iter(|| extract_crops(black_box(&page), &bin, &scan).unwrap())
    });
    let pipeline = AugmentationPipeline::ssl_full_default();
    let crop = synthetic::shape_glyph(3, 7);
    c.bench_function("ssl_augment/one_crop", |b| {
        let mut s = 0u64;
        b.iter(|| {
            s += 1;
            pipeline.apply(black_box(&crop), s)
        })
    });
}

pub fn benchmarks(c: &mut Criterion) {
    knn(c);
    vicreg(c);
    encoder(c);
    preprocessing(c);
}
