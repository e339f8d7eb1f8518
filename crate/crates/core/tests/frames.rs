use ductms::frames::{soft_threshold, FrameBank, FrameConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor::{PadMode, ParamStore, Tensor};

fn bank(kernels: &[usize], pad: PadMode) -> (FrameBank, ParamStore) {
    let fb = FrameBank::new(
        FrameConfig {
            kernels: kernels.to_vec(),
            pad,
        },
        "frame.",
    )
    .unwrap();
    let mut p = ParamStore::new();
    fb.init_tight(&mut p);
    (fb, p)
}

fn dot_all(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y).unwrap()).sum()
}

#[test]
fn zero_image_zero_pyramid_and_back() {
    let (fb, p) = bank(&[5, 7, 9, 11], PadMode::Circular);
    let c = fb.analyze_tensor(&p, &Tensor::zeros(vec![1, 1, 16, 16])).unwrap();
    assert_eq!(c.len(), 4);
    assert!(c.iter().all(|t| t.max_abs() == 0.0));
    let shapes: Vec<_> = c.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![1, 25, 16, 16], vec![1, 49, 8, 8], vec![1, 81, 4, 4], vec![1, 121, 2, 2]]);
    let x = fb.synthesize_tensor(&p, &c).unwrap();
    assert!(x.max_abs() == 0.0);
}

#[test]
fn analysis_is_linear() {
    let (fb, p) = bank(&[5, 7, 9, 11], PadMode::Zero);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        let a = Tensor::randn(vec![1, 1, 16, 16], 1.0, &mut r);
        let b = Tensor::randn(vec![1, 1, 16, 16], 1.0, &mut r);
        let mut ab = a.scale(1.5);
        ab.axpy(-0.5, &b).unwrap();
        let ca = fb.analyze_tensor(&p, &a).unwrap();
        let cb = fb.analyze_tensor(&p, &b).unwrap();
        let cab = fb.analyze_tensor(&p, &ab).unwrap();
        for s in 0..4 {
            let mut want = ca[s].scale(1.5);
            want.axpy(-0.5, &cb[s]).unwrap();
            assert!(cab[s].sub(&want).unwrap().norm() <= 1e-12 * want.norm().max(1e-300));
        }
    }
}

#[test]
fn constant_image_excites_only_dc_channels() {
    let (fb, p) = bank(&[5, 7, 9, 11], PadMode::Circular);
    let c = fb.analyze_tensor(&p, &Tensor::full(vec![1, 1, 32, 32], 0.8)).unwrap();
    for (s, t) in c.iter().enumerate() {
        let ch = t.shape()[1];
        let hw = t.shape()[2] * t.shape()[3];
        for k in 1..ch {
            let m = t.data()[k * hw..(k + 1) * hw].iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(m < 1e-12, "scale {} channel {} = {}", s + 1, k, m);
        }
    }
    // The whole constant lives in the coarsest DC channel.
    assert!(c[3].data()[0].abs() > 1.0);
}

#[test]
fn analyze_synthesize_adjoint_for_arbitrary_kernels() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for pad in [PadMode::Circular, PadMode::Zero] {
        let (fb, mut p) = bank(&[5, 7, 9, 11], pad);
        let names: Vec<String> = p.names().to_vec();
        for n in names {
            let shape = p.get(&n).unwrap().shape().to_vec();
            p.insert(n, Tensor::randn(shape, 0.3, &mut r));
        }
        for _ in 0..5 {
            let x = Tensor::randn(vec![2, 1, 16, 24], 1.0, &mut r);
            let cx = fb.analyze_tensor(&p, &x).unwrap();
            let c: Vec<Tensor> = cx.iter().map(|t| Tensor::randn(t.shape().to_vec(), 1.0, &mut r)).collect();
            let lhs = dot_all(&cx, &c);
            let rhs = x.dot(&fb.synthesize_tensor(&p, &c).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()), "{:?}: {} vs {}", pad, lhs, rhs);
        }
    }
}

#[test]
fn tight_frame_perfect_reconstruction() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for kernels in [vec![5], vec![5, 7, 9, 11]] {
        let (fb, p) = bank(&kernels, PadMode::Circular);
        for _ in 0..3 {
            let x = Tensor::randn(vec![1, 1, 32, 32], 1.0, &mut r);
            let y = fb.synthesize_tensor(&p, &fb.analyze_tensor(&p, &x).unwrap()).unwrap();
            let rel = y.sub(&x).unwrap().norm() / x.norm();
            assert!(rel <= 1e-10, "{:?}: {}", kernels, rel);
        }
    }
}

#[test]
fn indivisible_input_is_rejected() {
    let (fb, p) = bank(&[5, 7, 9, 11], PadMode::Circular);
    assert!(fb.analyze_tensor(&p, &Tensor::zeros(vec![1, 1, 12, 16])).is_err());
}

/// argmin_z ½(z−μ)² + ε|z| by exhaustive search on a grid of step `h`.
fn prox_grid(mu: f64, eps: f64, h: f64) -> f64 {
    let n = (4.0 / h) as i64;
    let mut best = (f64::INFINITY, 0.0);
    for i in -n..=n {
        let z = i as f64 * h;
        let f = 0.5 * (z - mu).powi(2) + eps * z.abs();
        if f < best.0 {
            best = (f, z);
        }
    }
    best.1
}

#[test]
fn soft_threshold_is_the_l1_prox() {
    let h = 1e-4;
    let mu: Vec<f64> = (0..200).map(|i| -2.0 + 4.0 * i as f64 / 199.0).collect();
    for &eps in &[0.0, 0.1, 0.35, 1.2] {
        let s = soft_threshold(&Tensor::new(vec![mu.len()], mu.clone()).unwrap(), &Tensor::scalar(eps)).unwrap();
        for (m, z) in mu.iter().zip(s.data()) {
            assert!((z - prox_grid(*m, eps, h)).abs() <= h, "μ={} ε={}", m, eps);
        }
    }
}

proptest! {
    #[test]
    fn soft_threshold_is_nonexpansive(a in prop::collection::vec(-3.0f64..3.0, 16),
                                      b in prop::collection::vec(-3.0f64..3.0, 16),
                                      e in prop::collection::vec(0.0f64..1.0, 16)) {
        let (ta, tb, te) = (
            Tensor::new(vec![16], a).unwrap(),
            Tensor::new(vec![16], b).unwrap(),
            Tensor::new(vec![16], e).unwrap(),
        );
        let (sa, sb) = (soft_threshold(&ta, &te).unwrap(), soft_threshold(&tb, &te).unwrap());
        prop_assert!(sa.sub(&sb).unwrap().norm() <= ta.sub(&tb).unwrap().norm() + 1e-15);
        for (x, y) in sa.data().iter().zip(ta.data()) {
            prop_assert!(x.abs() <= y.abs());
        }
    }
}
