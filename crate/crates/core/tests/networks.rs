//! Gradient and behaviour checks for PSATG, MSFuM and PMSRNet.

use ductms::msfum::Msfum;
use ductms::physics::DoseLevel;
use ductms::pmsrnet::{Pmsrnet, PmsrnetConfig, ThresholdOverride};
use ductms::psatg::{build_prompt, PromptConfig, Psatg, PsatgConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor::gradcheck::{check_params, random_direction};
use tensor::{Ctx, ParamStore, Tape, Tensor, Var};

/// ReLU and shrinkage kinks make wider central differences straddle
/// activation changes; at this step none of the fixtures do.
const H: f64 = 1e-7;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A fixed blob in the upper-left quarter.
fn blob_mask(x: &Tensor) -> Tensor {
    let [_, _, h, w] = x.dims4().unwrap();
    let mut m = Tensor::zeros(x.shape().to_vec());
    for y in h / 8..h / 4 {
        for c in w / 8..w / 4 {
            m.data_mut()[y * w + c] = 1.0;
        }
    }
    m
}

fn prompt_for(x: &Tensor, dose: DoseLevel) -> Tensor {
    build_prompt(x, &blob_mask(x), &[dose], &PromptConfig::default()).unwrap()
}

fn image(seed: u64, size: usize) -> Tensor {
    Tensor::randn(vec![1, 1, size, size], 0.3, &mut rng(seed))
        .add(&Tensor::full(vec![1, 1, size, size], 1.0))
        .unwrap()
}

/// Moves every zero-initialised tensor off zero so no branch is gated shut.
fn perturb(store: &mut ParamStore, seed: u64, std: f64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().to_vec();
    for n in names {
        let t = store.get(&n).unwrap().clone();
        let noise = Tensor::randn(t.shape().to_vec(), std, &mut r);
        store.insert(n, t.add(&noise).unwrap());
    }
}

fn weighted_sum<'t>(t: &'t Tape, v: Var<'t>, seed: u64) -> tensor::Result<Var<'t>> {
    let w = t.constant(Tensor::randn(v.shape(), 1.0, &mut rng(seed)))?;
    v.mul(w)?.sum()
}

fn psatg_setup(cfg: PsatgConfig) -> (Psatg, ParamStore) {
    let p = Psatg::new(cfg, &[25, 49], "p.").unwrap();
    let mut s = ParamStore::new();
    p.init(&mut s, &mut rng(1));
    (p, s)
}

fn psatg_loss<'t>(p: &Psatg, t: &'t Tape, s: &'t ParamStore, c: &Tensor, prompt: &Tensor) -> tensor::Result<Var<'t>> {
    let ctx = Ctx::new(t, s);
    let m = p.modulators(ctx, t.constant(prompt.clone())?)?;
    let eps = p
        .thresholds(ctx, 0, t.constant(c.clone())?, m.as_ref())?;
    weighted_sum(t, eps, 77)
}

#[test]
fn fc_head_gradients_match_finite_differences() {
    let (p, mut s) = psatg_setup(PsatgConfig::default());
    perturb(&mut s, 2, 0.05);
    let c = Tensor::randn(vec![1, 25, 16, 16], 1.0, &mut rng(3));
    let pr = prompt_for(&image(4, 16), DoseLevel::Quarter);
    let dirs: Vec<ParamStore> = (0..4).map(|i| random_direction(&s, |n| n.contains(".fc."), &mut rng(10 + i))).collect();
    let r = check_params(|t, s| psatg_loss(&p, t, s, &c, &pr), &s, &dirs, H).unwrap();
    assert!(r.passes(1e-5), "{:?}", r);
}

#[test]
fn threshold_generator_gradients_match_finite_differences() {
    for cfg in [
        PsatgConfig::default(),
        PsatgConfig {
            use_rieb: false,
            use_gieb: false,
            ..Default::default()
        },
    ] {
        let (p, mut s) = psatg_setup(cfg);
        perturb(&mut s, 5, 0.05);
        let c = Tensor::randn(vec![1, 25, 16, 16], 1.0, &mut rng(6));
        let pr = prompt_for(&image(7, 16), DoseLevel::Eighth);
        let dirs: Vec<ParamStore> = (0..6).map(|i| random_direction(&s, |_| true, &mut rng(20 + i))).collect();
        let r = check_params(|t, s| psatg_loss(&p, t, s, &c, &pr), &s, &dirs, H).unwrap();
        assert!(r.passes(1e-5), "{:?}", r);
    }
}

#[test]
fn every_psatg_parameter_receives_gradient() {
    let (p, mut s) = psatg_setup(PsatgConfig::default());
    perturb(&mut s, 8, 0.05);
    let c = Tensor::randn(vec![1, 25, 16, 16], 1.0, &mut rng(9));
    let pr = prompt_for(&image(10, 16), DoseLevel::Half);
    let t = Tape::new();
    // scale 0 only touches the first adapter/output pair
    let loss = psatg_loss(&p, &t, &s, &c, &pr).unwrap();
    let g = t.backward(loss).unwrap();
    let grads = t.param_grads(&g);
    for (name, _) in s.iter() {
        if name.contains("adapt2") || name.contains("out2") {
            continue;
        }
        let gr = grads.iter().find(|(n, _)| n == name).map(|(_, g)| g.max_abs()).unwrap_or(0.0);
        assert!(gr > 0.0, "no gradient reaches {}", name);
    }
}

#[test]
fn msfum_gradients_match_finite_differences() {
    let m = Msfum::new(3, 4, "f.");
    let mut s = ParamStore::new();
    m.init(&mut s, &mut rng(11));
    perturb(&mut s, 12, 0.2);
    let xh = Tensor::randn(vec![1, 3, 8, 8], 1.0, &mut rng(13));
    let xl = Tensor::randn(vec![1, 4, 4, 4], 1.0, &mut rng(14));
    let dirs: Vec<ParamStore> = (0..6).map(|i| random_direction(&s, |_| true, &mut rng(30 + i))).collect();
    let r = check_params(
        |t, s| {
            let ctx = Ctx::new(t, s);
            let out = m
                .fuse(ctx, t.constant(xh.clone())?, t.constant(xl.clone())?)?;
            weighted_sum(t, out, 78)
        },
        &s,
        &dirs,
        H,
    )
    .unwrap();
    assert!(r.passes(1e-5), "{:?}", r);
}

#[test]
fn pmsrnet_composition_gradient_check() {
    let n = Pmsrnet::new(PmsrnetConfig::default(), "x.").unwrap();
    let mut s = ParamStore::new();
    n.init(&mut s, &mut rng(15));
    perturb(&mut s, 16, 0.01);
    let x = image(17, 16);
    let pr = prompt_for(&x, DoseLevel::Quarter);
    let dirs: Vec<ParamStore> = (0..6).map(|i| random_direction(&s, |_| true, &mut rng(40 + i))).collect();
    let r = check_params(
        |t, s| {
            let ctx = Ctx::new(t, s);
            let out = n
                .apply(ctx, t.constant(x.clone())?, Some(t.constant(pr.clone())?), ThresholdOverride::None)?;
            weighted_sum(t, out, 79)
        },
        &s,
        &dirs,
        H,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{:?}", r);
}

#[test]
fn dose_channel_changes_thresholds_after_perturbed_heads() {
    let (p, mut s) = psatg_setup(PsatgConfig::default());
    // stand-in for one training step: move the prompt heads off their identity init
    perturb(&mut s, 18, 0.05);
    let c = vec![Tensor::randn(vec![1, 25, 16, 16], 1.0, &mut rng(19))];
    let x = image(20, 16);
    let a = p.thresholds_tensor(&s, &c, Some(&prompt_for(&x, DoseLevel::Half))).unwrap();
    let b = p.thresholds_tensor(&s, &c, Some(&prompt_for(&x, DoseLevel::Eighth))).unwrap();
    let d = a[0].sub(&b[0]).unwrap().map(f64::abs).mean();
    assert!(d > 0.0);
}
