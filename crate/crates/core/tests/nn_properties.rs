use cactusnet::nn::{
    conv2d, fit, load_checkpoint, one_hot, save_checkpoint, CheckpointError, LayerSpec, LossKind,
    Network, Tensor, TrainConfig,
};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Plain f32 quadruple loop, accumulating in (ky, kx, c_in) order.
fn direct_conv(input: &Tensor, kernels: &Tensor, stride: usize) -> Vec<f32> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[3]);
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let x = input.data();
    let k = kernels.data();
    let mut out = Vec::with_capacity(oh * ow * cout);
    for oy in 0..oh {
        for ox in 0..ow {
            for f in 0..cout {
                let mut acc = 0.0f32;
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..c {
                            acc += x[((oy * stride + ky) * w + ox * stride + kx) * c + ci]
                                * k[((ky * kw + kx) * c + ci) * cout + f];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn random(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn conv_matches_direct_loops_on_4x4() {
    let mut rng = StdRng::seed_from_u64(4);
    let input = random(&mut rng, &[4, 4, 1]);
    let kernel = random(&mut rng, &[2, 2, 1, 1]);
    let out = conv2d(&input, &kernel, 1).unwrap();
    assert_eq!(out.shape(), &[3, 3, 1]);
    for (a, b) in out.data().iter().zip(direct_conv(&input, &kernel, 1)) {
        assert!((a - b).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_oracle_equivalence(
        h in 1usize..=8, w in 1usize..=8, c in 1usize..=3,
        kh in 1usize..=8, kw in 1usize..=8, cout in 1usize..=3,
        stride in 1usize..=3, seed in any::<u64>(),
    ) {
        prop_assume!(kh <= h && kw <= w);
        let mut rng = StdRng::seed_from_u64(seed);
        let input = random(&mut rng, &[h, w, c]);
        let kernel = random(&mut rng, &[kh, kw, c, cout]);
        let out = conv2d(&input, &kernel, stride).unwrap();
        for (a, b) in out.data().iter().zip(direct_conv(&input, &kernel, stride)) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn softmax_rows_normalized(values in prop::collection::vec(-30.0f32..30.0, 2..40), width in 1usize..6) {
        let rows = values.len() / width;
        prop_assume!(rows >= 1);
        let x = Tensor::new(vec![rows, width], values[..rows * width].to_vec()).unwrap();
        let net = Network::new(&[width], vec![LayerSpec::softmax()], 0).unwrap();
        let y = net.predict(&x).unwrap();
        for r in 0..rows {
            let row = y.item(r);
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-5);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn frozen_layers_never_move(freeze_through in 0usize..4, steps in 1usize..12, seed in 0u64..1000) {
        let mut net = small_cnn(seed);
        net.freeze_through(freeze_through);
        let before = net.clone();
        let mut rng = StdRng::seed_from_u64(seed);
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 1, batch_size: 4, seed };
        for _ in 0..steps {
            let x = random(&mut rng, &[4, 8, 8, 1]);
            let y = one_hot(&[0, 1, 2, 1], 3);
            let (g, _) = net.backward(&x, &y, LossKind::CrossEntropy).unwrap();
            net = cactusnet::nn::sgd_step(&net, &g, &cfg).unwrap();
        }
        for i in 0..=freeze_through.min(net.len() - 1) {
            prop_assert_eq!(net.params(i), before.params(i));
        }
    }
}

fn small_cnn(seed: u64) -> Network {
    Network::new(
        &[8, 8, 1],
        vec![
            LayerSpec::conv(3, 3, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::flatten(),
            LayerSpec::dense(6),
            LayerSpec::relu(),
            LayerSpec::dense(3),
            LayerSpec::softmax(),
        ],
        seed,
    )
    .unwrap()
}

#[test]
fn training_is_deterministic() {
    let mut rng = StdRng::seed_from_u64(3);
    let x = random(&mut rng, &[24, 8, 8, 1]);
    let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
    let y = one_hot(&labels, 3);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        epochs: 3,
        batch_size: 5,
        seed: 77,
    };
    let run = || {
        let mut net = small_cnn(1);
        fit(&mut net, &x, &y, LossKind::CrossEntropy, &cfg).unwrap();
        net
    };
    let (a, b) = (run(), run());
    for (la, lb) in a.layers().iter().zip(b.layers()) {
        if let (Some(pa), Some(pb)) = (&la.params, &lb.params) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&pa.weights), bits(&pb.weights));
            assert_eq!(bits(&pa.bias), bits(&pb.bias));
        }
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = small_cnn(9);
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.architecture(), net.architecture());
    let mut rng = StdRng::seed_from_u64(10);
    let x = random(&mut rng, &[5, 8, 8, 1]);
    let (a, b) = (net.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn truncated_checkpoint_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&small_cnn(2), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::Truncated(_)) | Err(CheckpointError::PayloadLength { .. })
    ));
}
