use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ductms::physics::*;
use ductms::physics::phantom::disk_phantom;
use tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn geometries() -> Vec<FanBeamGeometry> {
    let mut g: Vec<_> = FanBeamGeometry::PRESETS
        .iter()
        .map(|p| FanBeamGeometry::preset(p).unwrap())
        .collect();
    g.push(FanBeamGeometry::covering(24, 36, 36));
    g
}

#[test]
fn projector_pair_is_adjoint() {
    for g in geometries() {
        let p = Projector::new(&g).unwrap();
        let mut r = rng(g.image_size as u64);
        for _ in 0..20 {
            let x = Tensor::randn(g.image_shape().to_vec(), 1.0, &mut r);
            let y = Tensor::randn(g.sino_shape().to_vec(), 1.0, &mut r);
            let px = p.forward_project(&x).unwrap();
            let lhs = px.dot(&y).unwrap();
            let rhs = x.dot(&p.back_project(&y).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-8 * px.norm() * y.norm(), "{:?}", g);
            assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()));
        }
    }
}

/// Columns of P assembled by projecting unit images one at a time.
fn dense_columns(p: &Projector) -> Vec<Tensor> {
    let g = p.geometry();
    (0..g.n_pixels())
        .map(|i| {
            let mut e = Tensor::zeros(g.image_shape().to_vec());
            e.data_mut()[i] = 1.0;
            p.forward_project(&e).unwrap()
        })
        .collect()
}

#[test]
fn back_projection_of_one_hot_is_matrix_row() {
    let p = Projector::new(&FanBeamGeometry::tiny()).unwrap();
    let g = p.geometry().clone();
    let cols = dense_columns(&p);
    for ray in (0..g.n_rays()).step_by(7) {
        let mut e = Tensor::zeros(g.sino_shape().to_vec());
        e.data_mut()[ray] = 1.0;
        let bt = p.back_project(&e).unwrap();
        for (i, col) in cols.iter().enumerate() {
            assert!((bt.data()[i] - col.data()[ray]).abs() < 1e-13);
        }
    }
}

#[test]
fn zero_maps_to_zero() {
    let g = FanBeamGeometry::desk();
    let p = Projector::new(&g).unwrap();
    assert!(p.forward_project(&Tensor::zeros(vec![64, 64])).unwrap().max_abs() == 0.0);
    assert!(p.back_project(&Tensor::zeros(vec![96, 96])).unwrap().max_abs() == 0.0);
}

#[test]
fn projection_is_linear() {
    let g = FanBeamGeometry::small();
    let p = Projector::new(&g).unwrap();
    let mut r = rng(3);
    for _ in 0..5 {
        let x1 = Tensor::randn(vec![16, 16], 1.0, &mut r);
        let x2 = Tensor::randn(vec![16, 16], 1.0, &mut r);
        let (a, b) = (0.7, -2.3);
        let mut comb = x1.scale(a);
        comb.axpy(b, &x2).unwrap();
        let lhs = p.forward_project(&comb).unwrap();
        let mut rhs = p.forward_project(&x1).unwrap().scale(a);
        rhs.axpy(b, &p.forward_project(&x2).unwrap()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().norm() <= 1e-10 * lhs.norm());
    }
}

#[test]
fn disk_chord_length() {
    let g = FanBeamGeometry::desk();
    let p = Projector::new(&g).unwrap();
    let (radius_px, mu) = (20.0, 0.02);
    let s = p.forward_project(&disk_phantom(64, radius_px, mu)).unwrap();
    let r_mm = radius_px * g.pixel_spacing;
    for v in [0, 17, 50] {
        for j in [g.n_detectors / 2 - 1, g.n_detectors / 2, g.n_detectors / 2 + 5] {
            let off = g.source_to_center * g.detector_angle(j).sin();
            let chord = 2.0 * (r_mm * r_mm - off * off).sqrt() * mu;
            let got = s.data()[v * g.n_detectors + j];
            assert!((got - chord).abs() <= 0.02 * chord, "view {} det {}: {} vs {}", v, j, got, chord);
        }
    }
}

#[test]
fn metal_trace_cases() {
    let g = FanBeamGeometry::tiny();
    let p = Projector::new(&g).unwrap();
    let empty = metal_trace(&p, &Tensor::zeros(vec![8, 8])).unwrap();
    assert_eq!(empty.sum(), 0.0);
    // Every ray crosses the circumscribed circle, but those grazing its
    // rim can miss the square grid; compare with the all-ones projection.
    let full = metal_trace(&p, &Tensor::ones(vec![8, 8])).unwrap();
    let ones = p.forward_project(&Tensor::ones(vec![8, 8])).unwrap();
    for (t, o) in full.data().iter().zip(ones.data()) {
        assert_eq!(*t, if *o > 0.0 { 1.0 } else { 0.0 });
    }
    let central = [g.n_detectors / 2 - 2, g.n_detectors / 2 + 1];
    for v in 0..g.n_views {
        for &j in &central {
            assert_eq!(full.data()[v * g.n_detectors + j], 1.0);
        }
    }

    let cols = dense_columns(&p);
    for pix in [0usize, 27, 36, 63] {
        let mut m = Tensor::zeros(vec![8, 8]);
        m.data_mut()[pix] = 1.0;
        let tr = metal_trace(&p, &m).unwrap();
        for v in 0..g.n_views {
            let row = &tr.data()[v * g.n_detectors..(v + 1) * g.n_detectors];
            let dense_row: Vec<f64> = (0..g.n_detectors)
                .map(|j| if cols[pix].data()[v * g.n_detectors + j] > 0.0 { 1.0 } else { 0.0 })
                .collect();
            assert_eq!(row, &dense_row[..]);
            let on: Vec<usize> = (0..row.len()).filter(|&j| row[j] > 0.0).collect();
            assert!(!on.is_empty(), "pixel {} invisible in view {}", pix, v);
            assert_eq!(on.last().unwrap() - on[0] + 1, on.len(), "non-contiguous footprint");
        }
    }
}

fn psnr_mu(a: &Tensor, b: &Tensor) -> f64 {
    let hu_a = to_hu(a);
    let hu_b = to_hu(b);
    let mse = hu_a.sub(&hu_b).unwrap().map(|v| v * v).mean();
    10.0 * (2000.0f64 * 2000.0 / mse).log10()
}

/// Frozen from the oracle run (24.63 dB over the whole grid; the residual
/// sits on the two-pixel skull rim, which 64×64 sampling cannot resolve).
const FBP_SHEPP_LOGAN_MIN_PSNR: f64 = 24.0;
/// Inside the skull (radius 20 px) the same run achieved 36.2 dB.
const FBP_SHEPP_LOGAN_INTERIOR_MIN_PSNR: f64 = 30.0;

#[test]
fn fbp_round_trip_on_shepp_logan() {
    let g = FanBeamGeometry::desk();
    let p = Projector::new(&g).unwrap();
    let x = make_phantom(PhantomKind::SheppLogan, 64, 0);
    let r = fbp(&p.forward_project(&x).unwrap(), &g, Apodization::None).unwrap();
    let psnr = psnr_mu(&r, &x);
    let interior: Vec<usize> = (0..64 * 64)
        .filter(|&i| {
            let (a, b) = ((i / 64) as f64 - 31.5, (i % 64) as f64 - 31.5);
            a * a + b * b < 400.0
        })
        .collect();
    let pick = |t: &Tensor| Tensor::new(vec![interior.len()], interior.iter().map(|&i| t.data()[i]).collect()).unwrap();
    let psnr_in = psnr_mu(&pick(&r), &pick(&x));
    println!("FBP Shepp-Logan PSNR {:.2} dB (interior {:.2} dB)", psnr, psnr_in);
    assert!(psnr >= FBP_SHEPP_LOGAN_MIN_PSNR, "{}", psnr);
    assert!(psnr_in >= FBP_SHEPP_LOGAN_INTERIOR_MIN_PSNR, "{}", psnr_in);
}

#[test]
fn fbp_recovers_disk_level() {
    let g = FanBeamGeometry::desk();
    let p = Projector::new(&g).unwrap();
    let mu = 0.02;
    let x = disk_phantom(64, 22.0, mu);
    let r = fbp(&p.forward_project(&x).unwrap(), &g, Apodization::None).unwrap();
    let inside: Vec<f64> = (0..64 * 64)
        .filter(|&i| {
            let (dr, dc) = ((i / 64) as f64 - 31.5, (i % 64) as f64 - 31.5);
            dr * dr + dc * dc < 18.0 * 18.0
        })
        .map(|i| r.data()[i])
        .collect();
    let mean = inside.iter().sum::<f64>() / inside.len() as f64;
    assert!((mean - mu).abs() <= 0.05 * mu, "mean {} vs {}", mean, mu);
}

#[test]
fn fbp_improves_with_views() {
    let x = make_phantom(PhantomKind::Random, 64, 5);
    let mut last = f64::NEG_INFINITY;
    for views in [24, 48, 96] {
        let g = FanBeamGeometry::covering(64, views, 96);
        let p = Projector::new(&g).unwrap();
        let r = fbp(&p.forward_project(&x).unwrap(), &g, Apodization::None).unwrap();
        let psnr = psnr_mu(&r, &x);
        assert!(psnr > last, "{} views: {} after {}", views, psnr, last);
        last = psnr;
    }
}

#[test]
fn poisson_statistics() {
    let n = 10_000;
    let draw = |s: f64, n0: f64, seed| degrade_low_dose(&Tensor::full(vec![n], s), Some(n0), seed).unwrap();
    let y = draw(1.0, 1e5, 1);
    assert!((y.mean() - 1.0).abs() <= 0.01);

    let mut last = 0.0;
    for dose in DoseLevel::ALL {
        let y = draw(2.0, dose.photons(), 2);
        let m = y.mean();
        let var = y.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let predicted = 2.0f64.exp() / dose.photons();
        assert!(var > last);
        assert!((var - predicted).abs() <= 0.1 * predicted, "{}: {} vs {}", dose, var, predicted);
        last = var;
    }
}

#[test]
fn noise_is_seeded_and_noiseless_limit_is_identity() {
    let s = Tensor::uniform(vec![10, 12], 0.0, 4.0, &mut rng(9));
    assert_eq!(degrade_low_dose(&s, None, 0).unwrap(), s);
    let a = degrade_low_dose(&s, Some(2.5e4), 42).unwrap();
    let b = degrade_low_dose(&s, Some(2.5e4), 42).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(a, degrade_low_dose(&s, Some(2.5e4), 43).unwrap());
}

#[test]
fn metal_insertion() {
    let img = make_phantom(PhantomKind::Random, 64, 1);
    let empty = MetalSpec::new(Tensor::zeros(vec![64, 64]), MU_METAL).unwrap();
    assert_eq!(insert_metal(&img, &empty).unwrap(), img);
    let full = MetalSpec::new(Tensor::ones(vec![64, 64]), MU_METAL).unwrap();
    assert!(insert_metal(&img, &full).unwrap().data().iter().all(|&v| v == MU_METAL));
    let disk = MetalSpec::new(ellipse_mask(64, (30.0, 34.0), 1.0, 0.0, 118).unwrap(), MU_METAL).unwrap();
    let out = insert_metal(&img, &disk).unwrap();
    assert_eq!(out.data().iter().filter(|&&v| v == MU_METAL).count(), 118);
    let bad = MetalSpec::new(Tensor::zeros(vec![8, 8]), MU_METAL).unwrap();
    assert!(insert_metal(&img, &bad).is_err());
}

#[test]
fn noise_free_sinogram_of_nonnegative_image_is_nonnegative() {
    let g = FanBeamGeometry::desk();
    let p = Projector::new(&g).unwrap();
    let s = p.forward_project(&make_phantom(PhantomKind::Random, 64, 2)).unwrap();
    assert!(s.min() >= 0.0);
}
