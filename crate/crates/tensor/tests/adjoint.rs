//! Inner-product adjoint tests for every convolution configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor::conv::{conv2d_adjoint, conv2d_forward};
use tensor::{ConvSpec, PadMode, Tensor};

fn check(spec: ConvSpec, cin: usize, cout: usize, k: usize, hw: (usize, usize), seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..20 {
        let x = Tensor::randn(vec![2, cin, hw.0, hw.1], 1.0, &mut rng);
        let w = Tensor::randn(vec![cout, cin / spec.groups, k, k], 1.0, &mut rng);
        let y0 = conv2d_forward(&x, &w, spec).unwrap();
        let y = Tensor::randn(y0.shape().to_vec(), 1.0, &mut rng);
        let lhs = y0.dot(&y).unwrap();
        let rhs = x.dot(&conv2d_adjoint(&y, &w, spec, hw).unwrap()).unwrap();
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
        assert!(rel <= 1e-10, "{:?} k={} hw={:?}: {} vs {}", spec, k, hw, lhs, rhs);
    }
}

#[test]
fn adjoint_all_configurations() {
    let mut seed = 0;
    for pad in [PadMode::Zero, PadMode::Circular] {
        for stride in [1, 2] {
            for &(k, hw) in &[(1, (6, 6)), (3, (8, 8)), (3, (7, 5)), (5, (8, 8)), (11, (8, 8))] {
                seed += 1;
                check(ConvSpec::new(pad, stride), 3, 2, k, hw, seed);
                check(ConvSpec::depthwise(pad, 4), 4, 4, k, hw, seed + 100);
            }
        }
    }
}

/// Dense matrix of the conv as a linear map, built column by column.
fn dense(w: &Tensor, spec: ConvSpec, cin: usize, hw: (usize, usize)) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n_in = cin * hw.0 * hw.1;
    let mut cols = Vec::with_capacity(n_in);
    let mut out_shape = vec![];
    for j in 0..n_in {
        let mut e = Tensor::zeros(vec![1, cin, hw.0, hw.1]);
        e.data_mut()[j] = 1.0;
        let y = conv2d_forward(&e, w, spec).unwrap();
        out_shape = y.shape().to_vec();
        cols.push(y.into_data());
    }
    (cols, out_shape)
}

#[test]
fn stride2_transpose_matches_dense_matrix_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for pad in [PadMode::Zero, PadMode::Circular] {
        let spec = ConvSpec::new(pad, 2);
        let w = Tensor::randn(vec![1, 1, 3, 3], 1.0, &mut rng);
        let hw = (4, 4);
        let (cols, out_shape) = dense(&w, spec, 1, hw);
        assert_eq!(out_shape, vec![1, 1, 2, 2]);
        for i in 0..4 {
            let mut e = Tensor::zeros(vec![1, 1, 2, 2]);
            e.data_mut()[i] = 1.0;
            let t = conv2d_adjoint(&e, &w, spec, hw).unwrap();
            for (j, col) in cols.iter().enumerate() {
                assert!((t.data()[j] - col[i]).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn stride2_transpose_places_kernel_at_even_offsets() {
    let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        *v = (i + 1) as f64;
    }
    let mut y = Tensor::zeros(vec![1, 1, 2, 2]);
    y.data_mut()[3] = 1.0;
    let x = conv2d_adjoint(&y, &w, ConvSpec::new(PadMode::Zero, 2), (4, 4)).unwrap();
    // Output (1,1) reads input rows/cols 1..=3 with stride 2 centre at (2,2).
    for r in 0..4 {
        for c in 0..4 {
            let want = if (1..=3).contains(&r) && (1..=3).contains(&c) {
                w.data()[(r - 1) * 3 + (c - 1)]
            } else {
                0.0
            };
            assert_eq!(x.data()[r * 4 + c], want);
        }
    }
}

#[test]
fn transpose_of_zero_is_zero() {
    let w = Tensor::ones(vec![2, 3, 3, 3]);
    let y = Tensor::zeros(vec![1, 2, 4, 4]);
    let x = conv2d_adjoint(&y, &w, ConvSpec::new(PadMode::Circular, 2), (8, 8)).unwrap();
    assert_eq!(x.shape(), &[1, 3, 8, 8]);
    assert!(x.data().iter().all(|&v| v == 0.0));
}
