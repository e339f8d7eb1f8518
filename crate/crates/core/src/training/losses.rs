//! Training losses. Images enter in water units (`x / μ_w`), sinograms as
//! line integrals, so both terms are dimensionless.
//!
//! ```text
//! L_mse   = ‖m⊙(x_out − x)‖² + ω₁‖s_out − s‖²
//! L_msp   = Σ_{n=1..N} ‖D_n(m⊙x_out) − D_n(m⊙x)‖²,   D₁ = id, D_{n+1} = pool₂ ∘ D_n
//! L       = L_mse + ω₂ L_msp
//! ```

use serde::{Deserialize, Serialize};
use tensor::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::physics::MU_WATER;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Sinogram term weight.
    pub omega1: f64,
    /// Multi-scale surrogate weight.
    pub omega2: f64,
    pub scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            omega1: 0.01,
            omega2: 1e-4,
            scales: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega1 >= 0.0 && self.omega1.is_finite() && self.omega2 >= 0.0 && self.omega2.is_finite()) {
            return Err(CoreError::Config("loss weights must be finite and nonnegative".into()));
        }
        if self.scales == 0 {
            return Err(CoreError::Config("loss.scales must be at least 1".into()));
        }
        Ok(())
    }
}

/// Reference tensors of one sample, shaped like the network outputs.
#[derive(Clone, Debug)]
pub struct Targets {
    /// Ground-truth image, attenuation units, `[1, 1, H, W]`.
    pub x: Tensor,
    /// Ground-truth sinogram, `[1, 1, V, D]`.
    pub s: Tensor,
    /// Non-metal mask.
    pub m: Tensor,
}

impl Targets {
    fn check(&self, x_out: &[usize], s_out: &[usize]) -> Result<()> {
        if self.x.shape() != x_out || self.m.shape() != x_out || self.s.shape() != s_out {
            return Err(CoreError::Usage(format!(
                "loss shapes disagree: x_out {:?}, s_out {:?}, x {:?}, m {:?}, s {:?}",
                x_out,
                s_out,
                self.x.shape(),
                self.m.shape(),
                self.s.shape()
            )));
        }
        Ok(())
    }
}

fn masked_image<'t>(t: &'t Tape, x: Var<'t>, m: &Tensor) -> Result<Var<'t>> {
    Ok(x.mul(t.constant(m.scale(1.0 / MU_WATER))?)?)
}

pub fn loss_mse<'t>(x_out: Var<'t>, s_out: Var<'t>, tg: &Targets, cfg: &LossConfig) -> Result<Var<'t>> {
    tg.check(&x_out.shape(), &s_out.shape())?;
    let t = x_out.tape();
    let target = t.constant(tg.x.mul(&tg.m)?.scale(1.0 / MU_WATER))?;
    let img = masked_image(t, x_out, &tg.m)?.sub(target)?.square()?.sum()?;
    let sino = s_out.sub(t.constant(tg.s.clone())?)?.square()?.sum()?;
    Ok(img.add(sino.scale(cfg.omega1)?)?)
}

pub fn loss_surrogate<'t>(x_out: Var<'t>, tg: &Targets, cfg: &LossConfig) -> Result<Var<'t>> {
    let sh = x_out.shape();
    if tg.x.shape() != sh.as_slice() || tg.m.shape() != sh.as_slice() {
        return Err(CoreError::Usage(format!("surrogate loss shapes disagree: {:?} vs {:?}", sh, tg.x.shape())));
    }
    let t = x_out.tape();
    let mut a = masked_image(t, x_out, &tg.m)?;
    let mut b = t.constant(tg.x.mul(&tg.m)?.scale(1.0 / MU_WATER))?;
    let mut total = a.sub(b)?.square()?.sum()?;
    for _ in 1..cfg.scales {
        a = a.avg_pool2()?;
        b = b.avg_pool2()?;
        total = total.add(a.sub(b)?.square()?.sum()?)?;
    }
    Ok(total)
}

pub fn loss_hybrid<'t>(x_out: Var<'t>, s_out: Var<'t>, tg: &Targets, cfg: &LossConfig) -> Result<Var<'t>> {
    let mse = loss_mse(x_out, s_out, tg, cfg)?;
    if cfg.omega2 == 0.0 {
        return Ok(mse);
    }
    Ok(mse.add(loss_surrogate(x_out, tg, cfg)?.scale(cfg.omega2)?)?)
}

/// Plain-tensor evaluation of [`loss_hybrid`].
pub fn hybrid_value(x_out: &Tensor, s_out: &Tensor, tg: &Targets, cfg: &LossConfig) -> Result<f64> {
    let t = Tape::inference();
    let l = loss_hybrid(t.constant(x_out.clone())?, t.constant(s_out.clone())?, tg, cfg)?;
    Ok(l.value().item()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn targets(seed: u64) -> Targets {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Tensor::ones(vec![1, 1, 8, 8]);
        for i in [9, 10, 17, 18] {
            m.data_mut()[i] = 0.0;
        }
        Targets {
            x: Tensor::uniform(vec![1, 1, 8, 8], 0.0, 0.04, &mut r),
            s: Tensor::randn(vec![1, 1, 6, 5], 1.0, &mut r),
            m,
        }
    }

    fn eval_mse(x: &Tensor, s: &Tensor, tg: &Targets, cfg: &LossConfig) -> f64 {
        let t = Tape::inference();
        loss_mse(t.constant(x.clone()).unwrap(), t.constant(s.clone()).unwrap(), tg, cfg)
            .unwrap()
            .value()
            .item()
            .unwrap()
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let tg = targets(1);
        assert_eq!(hybrid_value(&tg.x, &tg.s, &tg, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn metal_only_differences_leave_sinogram_term() {
        let tg = targets(2);
        let mut x = tg.x.clone();
        x.data_mut()[9] += 5.0;
        let s = tg.s.add(&Tensor::full(vec![1, 1, 6, 5], 0.5)).unwrap();
        let cfg = LossConfig::default();
        let got = eval_mse(&x, &s, &tg, &cfg);
        assert!((got - cfg.omega1 * 30.0 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_double_loop() {
        let tg = targets(3);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(vec![1, 1, 8, 8], 0.0, 0.04, &mut r);
        let s = Tensor::randn(vec![1, 1, 6, 5], 1.0, &mut r);
        let cfg = LossConfig::default();
        let mut want = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                let k = i * 8 + j;
                let d = tg.m.data()[k] * (x.data()[k] - tg.x.data()[k]) / MU_WATER;
                want += d * d;
            }
        }
        for i in 0..30 {
            want += cfg.omega1 * (s.data()[i] - tg.s.data()[i]).powi(2);
        }
        assert!((eval_mse(&x, &s, &tg, &cfg) - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn surrogate_matches_direct_pyramid() {
        let tg = targets(5);
        let x = Tensor::uniform(vec![1, 1, 8, 8], 0.0, 0.04, &mut ChaCha8Rng::seed_from_u64(6));
        let cfg = LossConfig::default();
        let diff: Vec<f64> = (0..64).map(|k| tg.m.data()[k] * (x.data()[k] - tg.x.data()[k]) / MU_WATER).collect();
        let mut want = 0.0;
        let mut level = diff;
        let mut n = 8;
        for _ in 0..3 {
            want += level.iter().map(|v| v * v).sum::<f64>();
            let h = n / 2;
            let next: Vec<f64> = (0..h * h)
                .map(|k| {
                    let (i, j) = (2 * (k / h), 2 * (k % h));
                    0.25 * (level[i * n + j] + level[i * n + j + 1] + level[(i + 1) * n + j] + level[(i + 1) * n + j + 1])
                })
                .collect();
            level = next;
            n = h;
        }
        let t = Tape::inference();
        let got = loss_surrogate(t.constant(x.clone()).unwrap(), &tg, &cfg).unwrap().value().item().unwrap();
        assert!((got - want).abs() <= 1e-12 * want);
        // one scale is the masked image error alone
        let one = LossConfig { scales: 1, ..cfg.clone() };
        let got1 = loss_surrogate(t.constant(x.clone()).unwrap(), &tg, &one).unwrap().value().item().unwrap();
        let s0 = tg.s.clone();
        let mse_img = eval_mse(&x, &s0, &tg, &cfg);
        assert!((got1 - mse_img).abs() <= 1e-12 * mse_img);
    }

    #[test]
    fn zero_surrogate_weight_reduces_to_mse() {
        let tg = targets(7);
        let x = tg.x.scale(1.1);
        let s = tg.s.scale(0.9);
        let cfg = LossConfig { omega2: 0.0, ..Default::default() };
        assert_eq!(hybrid_value(&x, &s, &tg, &cfg).unwrap(), eval_mse(&x, &s, &tg, &cfg));
        assert!(hybrid_value(&x, &s, &tg, &LossConfig::default()).unwrap() > 0.0);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let tg = targets(8);
        let t = Tape::inference();
        let x = t.constant(Tensor::zeros(vec![1, 1, 4, 4])).unwrap();
        let s = t.constant(tg.s.clone()).unwrap();
        assert!(loss_mse(x, s, &tg, &LossConfig::default()).is_err());
        assert!(LossConfig { scales: 0, ..Default::default() }.validate().is_err());
    }
}
