use proptest::prelude::*;
use tensor::conv::{conv2d_adjoint, conv2d_forward};
use tensor::{ConvSpec, PadMode, ParamStore, Tape, Tensor};

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in vec_of(12)) {
        let t = Tape::inference();
        let s = t.constant(Tensor::new(vec![3, 4], data).unwrap()).unwrap().softmax(1).unwrap().value();
        for r in 0..3 {
            let total: f64 = s.data()[r * 4..r * 4 + 4].iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_adjoint_identity(x in vec_of(2 * 6 * 6), y in vec_of(2 * 3 * 3), k in vec_of(2 * 2 * 3 * 3), circ in any::<bool>()) {
        let pad = if circ { PadMode::Circular } else { PadMode::Zero };
        let spec = ConvSpec::new(pad, 2);
        let x = Tensor::new(vec![1, 2, 6, 6], x).unwrap();
        let y = Tensor::new(vec![1, 2, 3, 3], y).unwrap();
        let k = Tensor::new(vec![2, 2, 3, 3], k).unwrap();
        let lhs = conv2d_forward(&x, &k, spec).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv2d_adjoint(&y, &k, spec, (6, 6)).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs().max(rhs.abs())));
    }

    #[test]
    fn checkpoint_round_trip(vals in prop::collection::vec(prop::num::f64::NORMAL, 0..20), name in "[a-z.]{1,12}") {
        let mut p = ParamStore::new();
        let n = vals.len();
        p.insert(name.clone(), Tensor::new(vec![n], vals).unwrap());
        let back = ParamStore::from_bytes(&p.to_bytes()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn checkpoint_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = ParamStore::from_bytes(&bytes);
    }
}
