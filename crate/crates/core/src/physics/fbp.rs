//! Equiangular fan-beam filtered back-projection.
//!
//! Projections are cosine weighted, convolved with the fan-beam ramp kernel
//! `g(γ) = ½ (γ / sin γ)² h(γ)` (band-limited Ram-Lak `h`, optionally Hann
//! apodised) by zero-padded FFT, then back-projected pixel by pixel with
//! the `1/L²` distance weight.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use tensor::Tensor;

use super::geometry::FanBeamGeometry;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Apodization {
    #[default]
    None,
    Hann,
}

/// Spatial fan-beam ramp kernel sampled at integer multiples of the
/// detector pitch, for lags `−(n−1)..=(n−1)`; index `n − 1` is lag 0.
pub fn fan_ramp_kernel(n: usize, alpha: f64) -> Vec<f64> {
    (0..2 * n - 1)
        .map(|i| {
            let k = i as i64 - (n as i64 - 1);
            if k == 0 {
                1.0 / (8.0 * alpha * alpha)
            } else if k % 2 == 0 {
                0.0
            } else {
                let g = k as f64 * alpha;
                let h = -1.0 / ((k * k) as f64 * std::f64::consts::PI.powi(2) * alpha * alpha);
                0.5 * (g / g.sin()).powi(2) * h
            }
        })
        .collect()
}

/// Filters every view: returns `α · (R·D·cos γ) ⊛ g` as a `[views, dets]` array.
pub fn filter_projections(sino: &Tensor, g: &FanBeamGeometry, apod: Apodization) -> Result<Tensor> {
    if sino.shape() != g.sino_shape() {
        return Err(CoreError::Geometry(format!(
            "sinogram {:?} does not match geometry {:?}",
            sino.shape(),
            g.sino_shape()
        )));
    }
    let nd = g.n_detectors;
    let alpha = g.detector_spacing;
    let m = (2 * nd).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);

    let kern = fan_ramp_kernel(nd, alpha);
    let mut kf = vec![Complex::new(0.0, 0.0); m];
    for (i, &v) in kern.iter().enumerate() {
        let lag = i as i64 - (nd as i64 - 1);
        kf[lag.rem_euclid(m as i64) as usize] = Complex::new(v, 0.0);
    }
    fwd.process(&mut kf);
    if apod == Apodization::Hann {
        for (k, c) in kf.iter_mut().enumerate() {
            let f = k.min(m - k) as f64 / m as f64;
            *c *= 0.5 * (1.0 + (2.0 * std::f64::consts::PI * f).cos());
        }
    }
    let cosw: Vec<f64> = (0..nd)
        .map(|j| g.source_to_center * g.detector_angle(j).cos())
        .collect();
    let mut out = vec![0.0; g.n_rays()];
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    for v in 0..g.n_views {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for j in 0..nd {
            buf[j] = Complex::new(sino.data()[v * nd + j] * cosw[j], 0.0);
        }
        fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&kf) {
            *b *= k;
        }
        inv.process(&mut buf);
        for j in 0..nd {
            out[v * nd + j] = alpha * buf[j].re / m as f64;
        }
    }
    Ok(Tensor::new(vec![g.n_views, nd], out)?)
}

/// Distance-weighted pixel-driven back-projection of filtered projections.
pub fn weighted_back_project(q: &Tensor, g: &FanBeamGeometry) -> Result<Tensor> {
    let n = g.image_size;
    let nd = g.n_detectors;
    let dbeta = 2.0 * std::f64::consts::PI / g.n_views as f64;
    let half = 0.5 * (nd as f64 - 1.0);
    let mut out = vec![0.0; n * n];
    for v in 0..g.n_views {
        let s = g.source(v);
        let (c0, c1) = (-s[0] / g.source_to_center, -s[1] / g.source_to_center);
        let row = &q.data()[v * nd..(v + 1) * nd];
        for r in 0..n {
            for c in 0..n {
                let p = g.pixel_center(r, c);
                let (w0, w1) = (p[0] - s[0], p[1] - s[1]);
                let l2 = w0 * w0 + w1 * w1;
                let gamma = (c0 * w1 - c1 * w0).atan2(c0 * w0 + c1 * w1);
                let u = gamma / g.detector_spacing + half;
                let u0 = u.floor();
                let t = u - u0;
                let i0 = u0 as i64;
                let at = |i: i64| if i >= 0 && (i as usize) < nd { row[i as usize] } else { 0.0 };
                let val = (1.0 - t) * at(i0) + t * at(i0 + 1);
                out[r * n + c] += dbeta * val / l2;
            }
        }
    }
    Ok(Tensor::new(vec![n, n], out)?)
}

/// Filtered back-projection of a `[views, dets]` sinogram.
pub fn fbp(sino: &Tensor, g: &FanBeamGeometry, apod: Apodization) -> Result<Tensor> {
    let q = filter_projections(sino, g, apod)?;
    weighted_back_project(&q, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_symmetric_with_expected_centre() {
        let k = fan_ramp_kernel(5, 0.01);
        assert_eq!(k.len(), 9);
        for i in 0..4 {
            assert_eq!(k[i], k[8 - i]);
        }
        assert!((k[4] - 1.0 / (8.0 * 1e-4)).abs() < 1e-9);
        assert_eq!(k[2], 0.0);
        assert!(k[3] < 0.0);
    }

    #[test]
    fn zero_in_zero_out() {
        let g = FanBeamGeometry::small();
        let r = fbp(&Tensor::zeros(vec![24, 24]), &g, Apodization::Hann).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }
}
