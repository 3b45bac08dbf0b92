use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sleepcbm_nn::layers::{Attention, BatchNorm1d, BiLstm, Conv1d, Dense, Dropout, LeakyRelu, MaxPool1d};
use sleepcbm_nn::{softmax, Layer, Mode, Sequential, Tensor2};

fn tensor(rows: usize, cols: usize, values: &[f64]) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |r, c| values[(r * cols + c) % values.len()])
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(e in prop::collection::vec(-50.0f64..50.0, 1..40), c in -100.0f64..100.0) {
        let p = softmax(&e);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = e.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_identity_paths(
        values in prop::collection::vec(-5.0f64..5.0, 1..30),
        rate in 0.0f64..0.95,
        seed in any::<u64>(),
    ) {
        let x = tensor(values.len(), 1, &values);
        let mut off = Dropout::new(rate, seed).unwrap();
        prop_assert_eq!(&off.forward(std::slice::from_ref(&x), Mode::Infer).unwrap()[0], &x);
        let mut zero = Dropout::new(0.0, seed).unwrap();
        prop_assert_eq!(&zero.forward(std::slice::from_ref(&x), Mode::Train).unwrap()[0], &x);
    }

    #[test]
    fn batchnorm_normalises_in_training(
        values in prop::collection::vec(-10.0f64..10.0, 8..64),
        channels in 1usize..4,
        batch in 1usize..4,
    ) {
        let rows = values.len() / channels;
        let xs: Vec<Tensor2> = (0..batch)
            .map(|b| Tensor2::from_fn(rows, channels, |r, c| values[(r * channels + c) % values.len()] * (1.0 + b as f64) + r as f64 * 0.1))
            .collect();
        let mut bn = BatchNorm1d::new(channels);
        let ys = bn.forward(&xs, Mode::Train).unwrap();
        for c in 0..channels {
            let col: Vec<f64> = ys.iter().flat_map(|y| (0..rows).map(move |r| y.get(r, c))).collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let raw: Vec<f64> = xs.iter().flat_map(|x| (0..rows).map(move |r| x.get(r, c))).collect();
            let rm = raw.iter().sum::<f64>() / n;
            let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / n;
            // eps in the denominator shrinks the variance slightly.
            prop_assert!((var - rv / (rv + bn.eps())).abs() < 1e-9);
        }
    }

    #[test]
    fn model_inference_is_deterministic(seed in any::<u64>(), phase in 0.0f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::new();
        net.push(Conv1d::new(1, 3, 5, &mut rng).unwrap());
        net.push(BatchNorm1d::new(3));
        net.push(LeakyRelu::new(0.01));
        net.push(MaxPool1d::new(4, 4).unwrap());
        net.push(BiLstm::new(3, 4, &mut rng).unwrap());
        net.push(Dropout::new(0.3, seed).unwrap());
        net.push(Attention::new(8, 8, 5, &mut rng).unwrap());
        net.push(Dense::new(8, 10, &mut rng));
        let x = Tensor2::from_fn(32, 1, |t, _| (t as f64 * 0.4 + phase).sin());
        let a = net.forward(std::slice::from_ref(&x), Mode::Infer).unwrap();
        let b = net.forward(std::slice::from_ref(&x), Mode::Infer).unwrap();
        prop_assert_eq!(a[0].dims(), (1, 10));
        prop_assert_eq!(a, b);
    }
}
