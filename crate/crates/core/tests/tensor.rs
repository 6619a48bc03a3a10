use hoiu::tensor::{gradcheck, DiffArray, Tape, TensorError};
use proptest::prelude::*;

// 50-digit mpmath values, see tests/oracles/mp_values.py.
const MP_SOFTMAX_123: [f64; 3] = [
    0.090_030_573_170_380_457_998_022_1,
    0.244_728_471_054_797_652_472_959_6,
    0.665_240_955_774_821_889_529_018_3,
];
const MP_SOFTPLUS_NEG5: f64 = 0.006_715_348_489_118_068_616_416_688;

fn mat(rows: &[Vec<f64>]) -> DiffArray {
    DiffArray::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity() {
    let mut t = Tape::new(0);
    let i2 = t.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let y = t.matmul(i2, i2).unwrap();
    assert_eq!(t.data(y), &[1.0, 0.0, 0.0, 1.0]);

    let a = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let y = t.matmul(a, i2).unwrap();
    assert_eq!(t.data(y), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_inner_dim_mismatch() {
    let mut t = Tape::new(0);
    let a = t.constant(DiffArray::zeros(&[2, 3]));
    let b = t.constant(DiffArray::zeros(&[2, 3]));
    assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for seed in 0..20 {
        let a = DiffArray::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = DiffArray::new(vec![4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let r = gradcheck::check(&[a, b], seed, 1e-5, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_error() < 1e-6, "seed {seed}: {}", r.max_error());
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new(0);
    let x = t.constant(DiffArray::vector(vec![0.0, 0.0, 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    for v in t.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = t.constant(DiffArray::vector(vec![1000.0, 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.data(y)[0], 1.0);
    assert!(t.data(y)[1] >= 0.0 && t.data(y)[1] < 1e-300);

    let x = t.constant(DiffArray::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    for (got, want) in t.data(y).iter().zip(MP_SOFTMAX_123) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
}

#[test]
fn softplus_examples() {
    let mut t = Tape::new(0);
    let x = t.constant(DiffArray::vector(vec![0.0, 700.0, -5.0, 1e4]).unwrap());
    let y = t.softplus(x);
    let d = t.data(y);
    assert!((d[0] - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(d[1].is_finite() && (d[1] - 700.0).abs() < 1e-12);
    assert!((d[2] - MP_SOFTPLUS_NEG5).abs() < 1e-17);
    assert!(d[3].is_finite());
}

#[test]
fn dropout_identity_cases() {
    let mut t = Tape::new(3);
    let x = t.leaf(DiffArray::vector(vec![0.5, -1.0, 2.0]).unwrap());
    let off = t.dropout(x, 0.7, false).unwrap();
    assert_eq!(t.data(off), t.data(x));
    let zero_rate = t.dropout(x, 0.0, true).unwrap();
    assert_eq!(t.data(zero_rate), t.data(x));
    assert!(matches!(t.dropout(x, 1.0, true), Err(TensorError::InvalidRate(_))));
    assert!(matches!(t.dropout(x, -0.1, true), Err(TensorError::InvalidRate(_))));
}

#[test]
fn dropout_mean_within_binomial_bounds() {
    let n = 100_000;
    let mut t = Tape::new(11);
    let x = t.constant(DiffArray::full(&[n], 1.0));
    let y = t.dropout(x, 0.5, true).unwrap();
    let mean = t.data(y).iter().sum::<f64>() / n as f64;
    // Each element is 2·Bernoulli(0.5): variance 1, so σ(mean) = 1/√n.
    let sigma = 1.0 / (n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
}

#[test]
fn dropout_masks_replay_with_seed() {
    let run = |seed| {
        let mut t = Tape::new(seed);
        let x = t.constant(DiffArray::full(&[64], 1.0));
        let y = t.dropout(x, 0.4, true).unwrap();
        t.data(y).to_vec()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn layer_norm_normalizes_rows() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let n = 16;
    let data: Vec<f64> = (0..8 * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut t = Tape::new(0);
    let x = t.constant(DiffArray::new(vec![8, n], data).unwrap());
    let g = t.constant(DiffArray::full(&[n], 1.0));
    let b = t.constant(DiffArray::zeros(&[n]));
    let y = t.layer_norm(x, g, b, 0.0).unwrap();
    for row in t.data(y).chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }
}

#[test]
fn op_suite_passes_on_hundred_seeds() {
    for seed in 0..100 {
        for (name, err) in gradcheck::op_suite(seed).unwrap() {
            assert!(err < 1e-4, "op {name} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn stale_handle_panics() {
    let mut a = Tape::new(0);
    let v = a.constant(DiffArray::scalar(1.0));
    let b = Tape::new(0);
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| b.item(v)));
    assert!(r.is_err());
    drop(a);
}

#[test]
fn backward_requires_scalar_root() {
    let mut t = Tape::new(0);
    let x = t.leaf(DiffArray::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn gradient_accumulates_over_reuse() {
    let mut t = Tape::new(0);
    let x = t.leaf(DiffArray::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    t.backward(z).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[7.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-15.0f64..15.0, 12)) {
        let mut t = Tape::new(0);
        let x = t.constant(DiffArray::new(vec![3, 4], data).unwrap());
        let y = t.softmax(x, 1).unwrap();
        for row in t.data(y).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn softplus_strictly_positive(x in -700.0f64..700.0) {
        let mut t = Tape::new(0);
        let v = t.constant(DiffArray::scalar(x));
        let y = t.softplus(v);
        prop_assert!(t.item(y) > 0.0);
    }
}
