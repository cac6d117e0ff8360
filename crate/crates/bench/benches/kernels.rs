use criterion::{black_box, criterion_group, criterion_main, Criterion};
use exgan_core::evaluation::{fid_from_embeddings, ms_ssim};
use exgan_core::nn::{ConvGeom, ParamBuilder, Tape};
use exgan_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.gen::<f64>()).collect())
}

fn conv(c: &mut Criterion) {
    let mut pb = ParamBuilder::new(0);
    let layer = pb.conv("c", 32, 32, ConvGeom::same(3, 1, 2));
    let params = pb.finish();
    let x = random(&[8, 32, 16, 16], 1);
    c.bench_function("conv3x3_dilated_32ch_16x16_b8_forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = tape.bind(&params, false);
            let xv = tape.constant(x.clone());
            let y = layer.forward(&mut tape, &p, xv);
            black_box(tape.value(y).sum())
        })
    });
    c.bench_function("conv3x3_dilated_32ch_16x16_b8_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = tape.bind(&params, true);
            let xv = tape.leaf(x.clone(), true);
            let y = layer.forward(&mut tape, &p, xv);
            let loss = tape.mean_abs_diff(y, &Tensor::zeros(&[8, 32, 16, 16]));
            black_box(tape.backward(loss).collect(&tape, &p).len())
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..300).map(|_| (0..16).map(|_| rng.gen()).collect()).collect() };
    let (a, b) = (rows(&mut rng), rows(&mut rng));
    c.bench_function("fid_300x16", |bench| bench.iter(|| black_box(fid_from_embeddings(&a, &b).unwrap())));
    let (x, y) = (random(&[3, 64, 64], 3), random(&[3, 64, 64], 4));
    c.bench_function("ms_ssim_64x64", |bench| bench.iter(|| black_box(ms_ssim(&x, &y).unwrap())));
}

criterion_group!(benches, conv, metrics);
criterion_main!(benches);
