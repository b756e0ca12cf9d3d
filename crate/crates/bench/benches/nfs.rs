use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nfs_core::autodiff::{conv1d, Mode, Tape};
use nfs_core::data::generate_synthetic;
use nfs_core::training::train;
use nfs_core::{ComposedModel, HeadConfig, HeadKind, NfsConfig, NfsModule, SyntheticSpec, Tensor, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(&[64, 24, 64], 1.0, &mut rng);
    let w = Tensor::uniform(&[32, 1, 64], 0.1, &mut rng);
    let b = Tensor::zeros(&[32]);
    c.bench_function("conv1d_forward_backward_64x24x64_to_32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
            let y = conv1d(&mut tape, xv, wv, bv).unwrap();
            let s = nfs_core::autodiff::sum(&mut tape, y);
            tape.backward(s).unwrap();
        })
    });
}

fn nfs_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[64, 24, 16], 1.0, &mut rng);
    let mut module = NfsModule::build(NfsConfig::with_streams(16), 0).unwrap();
    c.bench_function("nfs_forward_train_d16_t24_b64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::inference();
            let xv = tape.constant_tensor(&x);
            module.forward(&mut tape, xv, Mode::Train).unwrap()
        })
    });
}

fn epoch(c: &mut Criterion) {
    let spec = SyntheticSpec { samples: 512, ..SyntheticSpec::default() };
    let ds = generate_synthetic(&spec).unwrap();
    let config = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train_epoch_512_samples");
    group.sample_size(10);
    for kind in [HeadKind::Conv, HeadKind::Recurrent] {
        let head = HeadConfig { kind, ..HeadConfig::default() };
        let model = ComposedModel::build(NfsConfig::with_streams(16), head, 24, 0).unwrap();
        group.bench_function(format!("{kind:?}").to_lowercase(), |bench| {
            bench.iter_batched(
                || model.clone(),
                |mut m| train(&mut m, &ds, None, &config).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, conv, nfs_forward, epoch);
criterion_main!(benches);
