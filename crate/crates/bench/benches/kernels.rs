use criterion::{criterion_group, criterion_main, Criterion};
use heatmark_core::codec::{decode, encode, indicator};
use heatmark_core::loss::weighted_loss;
use heatmark_core::{CodecConfig, Graph, HeatmapStack, LandmarkSet, ModelConfig, Point, Tensor, UNetModel};
use std::hint::black_box;

fn pattern(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 1000) as f32 / 1000.0)
}

fn conv(c: &mut Criterion) {
    let x = pattern(&[8, 32, 32, 32]);
    let k = pattern(&[32, 32, 3, 3]);
    c.bench_function("conv2d forward 8x32x32x32 k3", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let xv = g.leaf(x.clone(), false);
            let kv = g.param(k.clone());
            black_box(g.conv2d(xv, kv, None, 1, 1).unwrap());
        })
    });
    c.bench_function("conv2d forward+backward 8x32x32x32 k3", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let xv = g.leaf(x.clone(), true);
            let kv = g.param(k.clone());
            let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
            let l = g.sum_all(y).unwrap();
            g.backward(l).unwrap();
        })
    });
}

fn codec(c: &mut Criterion) {
    let config = CodecConfig::new(10.0, 128).unwrap();
    let points = (0..8).map(|i| Point::new(10 + i * 13, 120 - i * 11)).collect();
    let set = LandmarkSet::new(points, 128).unwrap();
    c.bench_function("encode 8 landmarks on 128 grid", |b| b.iter(|| black_box(encode(&set, &config).unwrap())));
    let stack = encode(&set, &config).unwrap();
    c.bench_function("decode 8 maps on 128 grid", |b| b.iter(|| black_box(decode(&stack))));
    let pred = HeatmapStack::new(pattern(&[8, 128, 128])).unwrap();
    let mask = indicator(&stack);
    c.bench_function("weighted loss 8x128x128", |b| {
        b.iter(|| black_box(weighted_loss(&pred, &stack, &mask).unwrap()))
    });
}

fn model(c: &mut Criterion) {
    let model = UNetModel::<f32>::build(ModelConfig::default()).unwrap();
    let x = pattern(&[8, 3, 64, 64]);
    c.bench_function("model predict batch 8 at 64", |b| b.iter(|| black_box(model.predict(&x).unwrap())));
}

criterion_group!(benches, conv, codec, model);
criterion_main!(benches);
