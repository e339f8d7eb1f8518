use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor::{ConvSpec, PadMode, Tape, Tensor, TensorError};

#[test]
fn conv_of_zero_is_zero() {
    let t = Tape::inference();
    let x = t.constant(Tensor::zeros(vec![1, 1, 4, 4])).unwrap();
    let k = t.constant(Tensor::randn(vec![2, 1, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(0))).unwrap();
    let y = x.conv2d(k, ConvSpec::new(PadMode::Zero, 1)).unwrap();
    assert_eq!(y.shape(), vec![1, 2, 4, 4]);
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn impulse_response_is_flipped_kernel_for_cross_correlation() {
    let mut x = Tensor::zeros(vec![1, 1, 7, 7]);
    x.data_mut()[3 * 7 + 3] = 1.0;
    let k = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let t = Tape::inference();
    let y = t
        .constant(x)
        .unwrap()
        .conv2d(t.constant(k.clone()).unwrap(), ConvSpec::new(PadMode::Zero, 1))
        .unwrap()
        .value();
    // y[3+a, 3+b] = k[1-a, 1-b]: the kernel appears centred at the impulse,
    // point-reflected because the primitive is cross-correlation.
    for a in -1i32..=1 {
        for b in -1i32..=1 {
            let got = y.data()[((3 + a) * 7 + 3 + b) as usize];
            let want = k.data()[((1 - a) * 3 + 1 - b) as usize];
            assert_eq!(got, want);
        }
    }
    assert_eq!(y.sum(), 45.0);
}

#[test]
fn softmax_examples() {
    let t = Tape::inference();
    let c = t.constant(Tensor::full(vec![4], 2.5)).unwrap().softmax(0).unwrap().value();
    assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let p = t
        .constant(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap())
        .unwrap()
        .softmax(0)
        .unwrap()
        .value();
    assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_random_rows_match_direct_formula() {
    let x = Tensor::randn(vec![2, 5], 3.0, &mut ChaCha8Rng::seed_from_u64(3));
    let t = Tape::inference();
    let s = t.constant(x.clone()).unwrap().softmax(1).unwrap().value();
    for r in 0..2 {
        let row = &x.data()[r * 5..r * 5 + 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let total: f64 = s.data()[r * 5..r * 5 + 5].iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        for j in 0..5 {
            let want = row[j].exp() / z;
            assert!((s.data()[r * 5 + j] - want).abs() <= 1e-12 * want.max(1e-300) + 1e-15);
        }
    }
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let t = Tape::inference();
    let s = t
        .constant(Tensor::new(vec![3], vec![1000.0, 1000.0, -1000.0]).unwrap())
        .unwrap()
        .softmax(0)
        .unwrap()
        .value();
    assert_eq!(s.data(), &[0.5, 0.5, 0.0]);
}

#[test]
fn grad_of_sum_is_ones() {
    let t = Tape::new();
    let x = t.leaf(Tensor::randn(vec![2, 3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1)), true).unwrap();
    let g = t.backward(x.sum().unwrap()).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn non_requires_grad_leaves_have_no_gradient() {
    let t = Tape::new();
    let x = t.leaf(Tensor::ones(vec![3]), true).unwrap();
    let c = t.constant(Tensor::ones(vec![3])).unwrap();
    let g = t.backward(x.mul(c).unwrap().sum().unwrap()).unwrap();
    assert!(g.get(x).is_some());
    assert!(g.get(c).is_none());
}

#[test]
fn non_scalar_loss_is_usage_error() {
    let t = Tape::new();
    let x = t.leaf(Tensor::ones(vec![3]), true).unwrap();
    assert!(matches!(t.backward(x), Err(TensorError::Usage(_))));
}

#[test]
fn nan_input_is_numeric_error() {
    let t = Tape::new();
    let r = t.leaf(Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap(), true);
    assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    let x = t.leaf(Tensor::full(vec![1], 800.0), true).unwrap();
    assert!(matches!(x.exp(), Err(TensorError::NonFinite { .. })));
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let t = Tape::new();
    let a = t.leaf(Tensor::ones(vec![3]), true).unwrap();
    let b = t.leaf(Tensor::ones(vec![4]), true).unwrap();
    assert!(matches!(a.add(b), Err(TensorError::Shape { .. })));
    let x = t.constant(Tensor::ones(vec![1, 2, 4, 4])).unwrap();
    let k = t.constant(Tensor::ones(vec![1, 3, 3, 3])).unwrap();
    assert!(matches!(x.conv2d(k, ConvSpec::new(PadMode::Zero, 1)), Err(TensorError::Shape { .. })));
}

#[test]
fn upsample_of_constant_is_constant() {
    let t = Tape::inference();
    let u = t.constant(Tensor::full(vec![1, 2, 3, 5], 1.25)).unwrap().upsample2().unwrap().value();
    assert_eq!(u.shape(), &[1, 2, 6, 10]);
    assert!(u.data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::randn(vec![1, 2, 6, 6], 1.0, &mut rng);
        let k = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
        let t = Tape::new();
        let xv = t.leaf(x, true).unwrap();
        let kv = t.leaf(k, true).unwrap();
        let y = xv.conv2d(kv, ConvSpec::new(PadMode::Circular, 2)).unwrap().softplus().unwrap();
        let loss = y.reshape(vec![3, 9]).unwrap().softmax(1).unwrap().square().unwrap().sum().unwrap();
        let g = t.backward(loss).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        (bits(&loss.value()), bits(g.get(xv).unwrap()), bits(g.get(kv).unwrap()))
    };
    assert_eq!(run(), run());
}
