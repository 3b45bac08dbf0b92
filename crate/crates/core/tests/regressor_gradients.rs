use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepcbm_core::regressor::{loss_and_grad, Activation, MlpParams};

/// Largest relative error between the analytic gradient and central
/// differences with h = 1e-5.
fn worst_error(p: &MlpParams, x: &DMatrix<f64>, y: &DVector<f64>, l2: f64, act: Activation) -> f64 {
    let (_, g) = loss_and_grad(p, x, y, l2, act);
    let analytic = g.to_flat();
    let flat = p.to_flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let lp = loss_and_grad(&MlpParams::from_flat(p.inputs, p.hidden, &plus).unwrap(), x, y, l2, act).0;
        let lm = loss_and_grad(&MlpParams::from_flat(p.inputs, p.hidden, &minus).unwrap(), x, y, l2, act).0;
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    worst
}

fn random_problem(seed: u64) -> (MlpParams, DMatrix<f64>, DVector<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..12);
    let p = rng.random_range(1..8);
    let h = rng.random_range(1..10);
    let params = MlpParams::init(p, h, &mut rng);
    let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
    let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let l2 = rng.random_range(0.0..1.0);
    (params, x, y, l2)
}

#[test]
fn regularised_loss_gradient_matches_differences() {
    for seed in 0..25 {
        let (p, x, y, l2) = random_problem(seed);
        let e = worst_error(&p, &x, &y, l2, Activation::Relu);
        assert!(e < 1e-4, "seed {seed}: {e}");
        let e = worst_error(&p, &x, &y, l2, Activation::Tanh);
        assert!(e < 1e-4, "seed {seed} tanh: {e}");
    }
}

#[test]
fn penalty_excludes_biases() {
    let (p, x, y, _) = random_problem(99);
    let (l0, g0) = loss_and_grad(&p, &x, &y, 0.0, Activation::Relu);
    let (l1, g1) = loss_and_grad(&p, &x, &y, 2.0, Activation::Relu);
    let n = x.nrows() as f64;
    let sq: f64 = p.w1.iter().chain(&p.w2).map(|w| w * w).sum();
    assert!((l1 - l0 - sq / n).abs() < 1e-12);
    assert_eq!(g0.b1, g1.b1);
    assert_eq!(g0.b2, g1.b2);
}
