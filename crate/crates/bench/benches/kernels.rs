use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use hoistlab_core::eval::st_iou;
use hoistlab_core::losses::{contact_mask, hungarian};
use hoistlab_core::mask::SpatioTemporalMask;
use hoistlab_core::rle::{rle_decode, rle_encode};

fn blob(r: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> SpatioTemporalMask {
    let (cy, cx) = (r.random_range(0..h) as f64, r.random_range(0..w) as f64);
    let rad = (h.min(w) / 4) as f64;
    SpatioTemporalMask::from_array(Array3::from_shape_fn((t, h, w), |(k, y, x)| {
        let (dy, dx) = (y as f64 - cy - k as f64, x as f64 - cx);
        dy * dy + dx * dx < rad * rad
    }))
}

fn bench_hungarian(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let cost = Array2::from_shape_simple_fn((8, 32), || r.random_range(0.0..1.0));
    c.bench_function("hungarian 8x32", |b| b.iter(|| hungarian(black_box(&cost)).unwrap()));
}

fn bench_rle(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let m = blob(&mut r, 1, 256, 256);
    let frame = m.frame(0).mapv(u8::from);
    let rle = rle_encode(frame.view()).unwrap();
    c.bench_function("rle encode 256x256", |b| b.iter(|| rle_encode(black_box(frame.view())).unwrap()));
    c.bench_function("rle decode 256x256", |b| b.iter(|| rle_decode(black_box(&rle)).unwrap()));
}

fn bench_masks(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let a = blob(&mut r, 8, 96, 96);
    let b2 = blob(&mut r, 8, 96, 96);
    c.bench_function("st_iou 8x96x96", |b| b.iter(|| st_iou(black_box(&a), black_box(&b2)).unwrap()));
    c.bench_function("contact_mask 8x96x96 r=2", |b| {
        b.iter(|| contact_mask(black_box(&a), black_box(&b2), 2).unwrap())
    });
}

criterion_group!(benches, bench_hungarian, bench_rle, bench_masks);
criterion_main!(benches);
