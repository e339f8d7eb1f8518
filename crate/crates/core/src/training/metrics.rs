//! Image-quality metrics on 2-D images (any leading singleton dims).
//!
//! PSNR and RMSE are computed in HU; SSIM uses the classic 11×11 Gaussian
//! window (σ = 1.5) with `K₁ = 0.01`, `K₂ = 0.03`, evaluated on the valid
//! region. Zero error gives `PSNR = +∞`.

use serde::{Deserialize, Serialize};
use tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::physics::to_hu;

/// HU span used for PSNR and SSIM (`[-1000, 1000]`).
pub const HU_RANGE: f64 = 2000.0;

fn same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(CoreError::Usage(format!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(CoreError::Usage(format!("expected a single image, got {:?}", s)));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log₁₀(range² / MSE)`; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / e).log10())
}

fn gaussian_window() -> Vec<f64> {
    let k: Vec<f64> = (-5..=5).map(|i: i32| (-(i * i) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

/// Mean SSIM for images with dynamic range `range`.
pub fn ssim(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    same(a, b)?;
    let (h, w) = plane(a)?;
    if h < 11 || w < 11 {
        return Err(CoreError::Usage(format!("SSIM needs at least 11×11 pixels, got {}×{}", h, w)));
    }
    let g = gaussian_window();
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let (ad, bd) = (a.data(), b.data());
    // separable valid filtering of the five moment images
    let filt = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let wo = w - 10;
        let mut rows = vec![0.0; h * wo];
        for i in 0..h {
            for j in 0..wo {
                rows[i * wo + j] = (0..11).map(|k| g[k] * f(i * w + j + k)).sum();
            }
        }
        let ho = h - 10;
        let mut out = vec![0.0; ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                out[i * wo + j] = (0..11).map(|k| g[k] * rows[(i + k) * wo + j]).sum();
            }
        }
        out
    };
    let mu_a = filt(&|i| ad[i]);
    let mu_b = filt(&|i| bd[i]);
    let aa = filt(&|i| ad[i] * ad[i]);
    let bb = filt(&|i| bd[i] * bd[i]);
    let ab = filt(&|i| ad[i] * bd[i]);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|k| {
            let (ma, mb) = (mu_a[k], mu_b[k]);
            let va = aa[k] - ma * ma;
            let vb = bb[k] - mb * mb;
            let cov = ab[k] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// RMSE in HU between two attenuation images.
pub fn rmse_hu(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mse(&to_hu(a), &to_hu(b))?.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

impl Metrics {
    /// Metrics of `pred` against `gt` (attenuation units) outside the metal:
    /// implant pixels of `pred` are replaced by the reference before scoring.
    pub fn evaluate(pred: &Tensor, gt: &Tensor, non_metal: Option<&Tensor>) -> Result<Metrics> {
        same(pred, gt)?;
        let p = match non_metal {
            Some(m) => {
                same(pred, m)?;
                let mut p = pred.clone();
                for ((v, &g), &k) in p.data_mut().iter_mut().zip(gt.data()).zip(m.data()) {
                    if k == 0.0 {
                        *v = g;
                    }
                }
                p
            }
            None => pred.clone(),
        };
        let (ph, gh) = (to_hu(&p), to_hu(gt));
        Ok(Metrics {
            psnr: psnr(&ph, &gh, HU_RANGE)?,
            ssim: ssim(&ph, &gh, HU_RANGE)?,
            rmse: mse(&ph, &gh)?.sqrt(),
        })
    }

    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        Metrics {
            psnr: all.iter().map(|m| m.psnr).sum::<f64>() / n,
            ssim: all.iter().map(|m| m.ssim).sum::<f64>() / n,
            rmse: all.iter().map(|m| m.rmse).sum::<f64>() / n,
        }
    }
}

/// Sample mean and (n−1) standard deviation; the SD is reported as zero
/// for a single value or a non-finite mean.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() == 1 || !m.is_finite() {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::MU_WATER;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_images_are_perfect() {
        let a = Tensor::uniform(vec![16, 16], 0.0, 0.04, &mut ChaCha8Rng::seed_from_u64(1));
        let m = Metrics::evaluate(&a, &a, None).unwrap();
        assert_eq!(m.psnr, f64::INFINITY);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert_eq!(m.rmse, 0.0);
    }

    #[test]
    fn constant_offset_has_analytic_scores() {
        let a = Tensor::uniform(vec![16, 16], 0.0, 0.04, &mut ChaCha8Rng::seed_from_u64(2));
        let b = a.map(|v| v + 10.0 * MU_WATER / 1000.0);
        assert!((rmse_hu(&a, &b).unwrap() - 10.0).abs() < 1e-9);
        let p = psnr(&to_hu(&a), &to_hu(&b), HU_RANGE).unwrap();
        assert!((p - 10.0 * (2000.0f64 * 2000.0 / 100.0).log10()).abs() < 1e-9);
        assert!((p - 46.02).abs() < 5e-3);
    }

    #[test]
    fn anticorrelated_checkerboards_score_lower() {
        let c = Tensor::new(vec![16, 16], (0..256).map(|k| if (k / 16 + k % 16) % 2 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        let d = c.scale(-1.0);
        let same = ssim(&c, &c, 2.0).unwrap();
        let anti = ssim(&c, &d, 2.0).unwrap();
        assert!(anti < same);
        assert!(anti < 0.0);
    }

    #[test]
    fn metal_pixels_are_ignored() {
        let a = Tensor::full(vec![16, 16], MU_WATER);
        let mut b = a.clone();
        b.data_mut()[17] = 1.0;
        let mut m = Tensor::ones(vec![16, 16]);
        m.data_mut()[17] = 0.0;
        assert_eq!(Metrics::evaluate(&b, &a, Some(&m)).unwrap().psnr, f64::INFINITY);
        assert!(Metrics::evaluate(&b, &a, None).unwrap().psnr.is_finite());
    }

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[f64::INFINITY, f64::INFINITY]), (f64::INFINITY, 0.0));
    }
}
