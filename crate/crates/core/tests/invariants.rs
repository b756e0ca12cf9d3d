use nfs_core::autodiff::{batchnorm, conv1d, l1_penalty, BatchNormState, Mode, Tape};
use nfs_core::data::generate_synthetic;
use nfs_core::training::{train, TrainConfig};
use nfs_core::{
    select_top_k, stream_scores, CompactMode, ComposedModel, FeatureMask, HeadConfig, HeadKind, NfsConfig, NfsModule,
    SyntheticSpec, TaskKind, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn nfs_output(module: &mut NfsModule, x: &Tensor, mode: Mode) -> (Tensor, Tensor) {
    let mut tape = Tape::inference();
    let vars = module.bind(&mut tape);
    let xv = tape.constant_tensor(x);
    let trace = module.forward_bound(&mut tape, &vars, xv, mode, None).unwrap();
    (tape.to_tensor(trace.concat), tape.to_tensor(trace.output))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn same_padding_keeps_length(len in 5usize..40, width in 2usize..=5, c_in in 1usize..4, seed in any::<u64>()) {
        let mut tape = Tape::inference();
        let x = tape.constant_tensor(&random(&[2, len, c_in], seed));
        let w = tape.constant_tensor(&random(&[3, width, c_in], seed ^ 1));
        let b = tape.constant_tensor(&Tensor::zeros(&[3]));
        let y = conv1d(&mut tape, x, w, b).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, len, 3]);
    }

    #[test]
    fn batchnorm_standardizes_each_channel(
        batch in 1usize..6,
        len in 8usize..20,
        spread in prop::collection::vec(5.0f64..500.0, 1..5),
        seed in any::<u64>(),
    ) {
        let c = spread.len();
        let raw = random(&[batch, len, c], seed);
        let data: Vec<f64> = raw.data().iter().enumerate().map(|(i, v)| 3.0 + v * spread[i % c]).collect();
        let mut tape = Tape::inference();
        let x = tape.constant(vec![batch, len, c], data);
        let alpha = tape.constant(vec![c], vec![1.0; c]);
        let beta = tape.constant(vec![c], vec![0.0; c]);
        let y = batchnorm(&mut tape, x, alpha, beta, &mut BatchNormState::new(c), Mode::Train).unwrap();
        let y = tape.value(y);
        let rows = (batch * len) as f64;
        for ch in 0..c {
            let col: Vec<f64> = y.iter().skip(ch).step_by(c).copied().collect();
            let mean = col.iter().sum::<f64>() / rows;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
            prop_assert!(mean.abs() < 1e-8, "mean {}", mean);
            prop_assert!((var - 1.0).abs() < 1e-6, "var {}", var);
        }
    }

    #[test]
    fn l1_is_positively_homogeneous(v in prop::collection::vec(-10.0f64..10.0, 1..20), c in -5.0f64..5.0, gamma in 0.0f64..2.0) {
        let mut tape = Tape::inference();
        let n = v.len();
        let base = tape.constant(vec![n], v.clone());
        let scaled = tape.constant(vec![n], v.iter().map(|x| c * x).collect());
        let lhs = l1_penalty(&mut tape, scaled, gamma);
        let rhs = l1_penalty(&mut tape, base, gamma);
        let (lhs, rhs) = (tape.item(lhs), c.abs() * tape.item(rhs));
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn paths_do_not_interact(d in 2usize..6, stream in 0usize..6, seed in any::<u64>()) {
        let stream = stream % d;
        let mut module = NfsModule::build(NfsConfig { n_aggregate: 4, ..NfsConfig::with_streams(d) }, seed).unwrap();
        let x = random(&[3, 10, d], seed);
        let mut moved = x.clone();
        for b in 0..3 {
            for t in 0..10 {
                moved.set(&[b, t, stream], moved.at(&[b, t, stream]) + 0.75);
            }
        }
        let (before, _) = nfs_output(&mut module, &x, Mode::Train);
        let (after, _) = nfs_output(&mut module, &moved, Mode::Train);
        let k = module.config().channels_per_stream();
        let channels = d * k;
        for (i, (a, b)) in before.data().iter().zip(after.data()).enumerate() {
            if (i % channels) / k != stream {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn output_channels_do_not_depend_on_surviving_streams(d in 1usize..8, keep in 1usize..8, seed in any::<u64>()) {
        let keep = keep.min(d);
        let module = NfsModule::build(NfsConfig { n_aggregate: 5, ..NfsConfig::with_streams(d) }, seed).unwrap();
        let mask = FeatureMask::new((0..keep).collect(), d).unwrap();
        let mut compact = module.compact(&mask, CompactMode::Fresh, seed).unwrap();
        let (_, out) = nfs_output(&mut compact, &random(&[2, 8, keep], seed), Mode::Train);
        prop_assert_eq!(out.shape(), &[2, 8, 5]);
    }

    #[test]
    fn top_k_is_ascending_and_sized(scores in prop::collection::vec(0.0f64..3.0, 1..12), k in 1usize..12) {
        let k = k.min(scores.len());
        let mask = select_top_k(&nfs_core::ImportanceScores::from_scores(scores), k).unwrap();
        prop_assert_eq!(mask.len(), k);
        prop_assert!(mask.indices().windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn shrinking_a_scale_never_raises_the_penalty() {
    let mut module = NfsModule::build(NfsConfig::with_streams(3), 2).unwrap();
    let penalty = |m: &NfsModule| {
        let mut tape = Tape::inference();
        let vars = m.bind(&mut tape);
        let p = m.scale_penalty(&mut tape, &vars, 0.01);
        tape.item(p)
    };
    let start = penalty(&module);
    let expected: f64 = 0.01 * module.bn_scale().data().iter().map(|a| a.abs()).sum::<f64>();
    assert!((start - expected).abs() < 1e-15);
    module.bn_scale_mut().data_mut()[4] *= 0.5;
    assert!(penalty(&module) <= start);
    module.bn_scale_mut().data_mut()[4] = 0.0;
    assert!(penalty(&module) < start);
}

#[test]
fn training_is_bit_reproducible() {
    let spec = SyntheticSpec { samples: 96, seq_len: 12, streams: 4, informative: vec![0, 3], ..Default::default() };
    let ds = generate_synthetic(&spec).unwrap();
    assert_eq!(generate_synthetic(&spec).unwrap(), ds);
    let run = || {
        let nfs = NfsConfig { n_aggregate: 6, ..NfsConfig::with_streams(4) };
        let head = HeadConfig { kind: HeadKind::Recurrent, task: TaskKind::Regression, in_channels: 6, hidden: 5, ..Default::default() };
        let mut m = ComposedModel::build(nfs, head, 12, 17).unwrap();
        let history = train(&mut m, &ds, None, &TrainConfig { epochs: 2, batch_size: 16, ..Default::default() }).unwrap();
        (m, history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    for ((_, x), (_, y)) in a.params().iter().zip(b.params()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_eq!(stream_scores(&a.nfs), stream_scores(&b.nfs));
}
