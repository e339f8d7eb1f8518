//! Ray-driven fan-beam projector.
//!
//! Each ray is clipped to the circle circumscribing the image and sampled
//! at (at most) half-pixel steps; every sample bilinearly interpolates the
//! four surrounding pixel centres, weighted by the step length. The
//! resulting sparse system matrix is stored once, so `back_project` uses
//! exactly the transposed weights.

use std::sync::OnceLock;

use tensor::Tensor;

use super::geometry::FanBeamGeometry;
use crate::error::{CoreError, Result};

pub struct Projector {
    geom: FanBeamGeometry,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    norm: OnceLock<f64>,
}

impl std::fmt::Debug for Projector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Projector")
            .field("geom", &self.geom)
            .field("nnz", &self.vals.len())
            .finish()
    }
}

impl Projector {
    pub fn new(geom: &FanBeamGeometry) -> Result<Self> {
        geom.validate()?;
        let n = geom.image_size;
        let ps = geom.pixel_spacing;
        let radius = geom.fov_radius();
        let d = geom.source_to_center;
        let mut scratch = vec![0.0; n * n];
        let mut touched: Vec<u32> = Vec::new();
        let mut row_start = Vec::with_capacity(geom.n_rays() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_start.push(0);
        for v in 0..geom.n_views {
            let s = geom.source(v);
            for j in 0..geom.n_detectors {
                let dir = geom.ray_direction(v, j);
                let b = s[0] * dir[0] + s[1] * dir[1];
                let disc = b * b - (d * d - radius * radius);
                if disc > 0.0 {
                    let root = disc.sqrt();
                    let (t0, t1) = (-b - root, -b + root);
                    let steps = ((t1 - t0) / (0.5 * ps)).ceil().max(1.0) as usize;
                    let dt = (t1 - t0) / steps as f64;
                    for k in 0..steps {
                        let t = t0 + (k as f64 + 0.5) * dt;
                        let (px, py) = (s[0] + t * dir[0], s[1] + t * dir[1]);
                        let fc = px / ps + 0.5 * n as f64 - 0.5;
                        let fr = 0.5 * n as f64 - 0.5 - py / ps;
                        let (c0, r0) = (fc.floor(), fr.floor());
                        let (wc, wr) = (fc - c0, fr - r0);
                        for (dr, wy) in [(0i64, 1.0 - wr), (1, wr)] {
                            for (dc, wx) in [(0i64, 1.0 - wc), (1, wc)] {
                                let (r, c) = (r0 as i64 + dr, c0 as i64 + dc);
                                let w = wy * wx * dt;
                                if r < 0 || c < 0 || r >= n as i64 || c >= n as i64 || w == 0.0 {
                                    continue;
                                }
                                let idx = r as usize * n + c as usize;
                                if scratch[idx] == 0.0 {
                                    touched.push(idx as u32);
                                }
                                scratch[idx] += w;
                            }
                        }
                    }
                }
                touched.sort_unstable();
                for &idx in &touched {
                    cols.push(idx);
                    vals.push(scratch[idx as usize]);
                    scratch[idx as usize] = 0.0;
                }
                touched.clear();
                row_start.push(cols.len());
            }
        }
        Ok(Projector {
            geom: geom.clone(),
            row_start,
            cols,
            vals,
            norm: OnceLock::new(),
        })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geom
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    fn batch_of(&self, t: &Tensor, inner: [usize; 2], what: &str) -> Result<(usize, Vec<usize>)> {
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 2..] != inner {
            return Err(CoreError::Geometry(format!(
                "{} of shape {:?} does not end in {:?}",
                what, s, inner
            )));
        }
        Ok((s[..s.len() - 2].iter().product(), s[..s.len() - 2].to_vec()))
    }

    /// Line integrals of every trailing `[H, W]` plane of `img`.
    pub fn forward_project(&self, img: &Tensor) -> Result<Tensor> {
        let (batch, lead) = self.batch_of(img, self.geom.image_shape(), "image")?;
        let (np, nr) = (self.geom.n_pixels(), self.geom.n_rays());
        let mut out = vec![0.0; batch * nr];
        for b in 0..batch {
            let x = &img.data()[b * np..(b + 1) * np];
            for (r, o) in out[b * nr..(b + 1) * nr].iter_mut().enumerate() {
                let (lo, hi) = (self.row_start[r], self.row_start[r + 1]);
                *o = self.cols[lo..hi]
                    .iter()
                    .zip(&self.vals[lo..hi])
                    .map(|(&c, &w)| w * x[c as usize])
                    .sum();
            }
        }
        let mut shape = lead;
        shape.extend(self.geom.sino_shape());
        Ok(Tensor::new(shape, out)?)
    }

    /// Exact adjoint of [`Projector::forward_project`].
    pub fn back_project(&self, sino: &Tensor) -> Result<Tensor> {
        let (batch, lead) = self.batch_of(sino, self.geom.sino_shape(), "sinogram")?;
        let (np, nr) = (self.geom.n_pixels(), self.geom.n_rays());
        let mut out = vec![0.0; batch * np];
        for b in 0..batch {
            let y = &sino.data()[b * nr..(b + 1) * nr];
            let acc = &mut out[b * np..(b + 1) * np];
            for (r, &yr) in y.iter().enumerate() {
                if yr == 0.0 {
                    continue;
                }
                let (lo, hi) = (self.row_start[r], self.row_start[r + 1]);
                for (&c, &w) in self.cols[lo..hi].iter().zip(&self.vals[lo..hi]) {
                    acc[c as usize] += w * yr;
                }
            }
        }
        let mut shape = lead;
        shape.extend(self.geom.image_shape());
        Ok(Tensor::new(shape, out)?)
    }

    /// Row `ray` of the system matrix as (pixel, weight) pairs.
    pub fn row(&self, ray: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_start[ray], self.row_start[ray + 1]);
        self.cols[lo..hi].iter().map(|&c| c as usize).zip(self.vals[lo..hi].iter().copied())
    }

    /// Spectral norm ‖P‖₂ by power iteration on PᵀP (cached).
    pub fn norm(&self) -> f64 {
        *self.norm.get_or_init(|| power_norm(self, 200))
    }
}

fn power_norm(p: &Projector, iters: usize) -> f64 {
    let g = p.geometry();
    let n = g.image_size;
    // Deterministic, non-symmetric start so no eigenvector is missed by symmetry.
    let mut x = Tensor::new(
        vec![n, n],
        (0..n * n).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect(),
    )
    .expect("square image");
    let mut lambda = 0.0;
    for _ in 0..iters {
        let nx = x.norm();
        x = x.scale(1.0 / nx);
        let y = p.back_project(&p.forward_project(&x).expect("matching image")).expect("matching sinogram");
        lambda = x.dot(&y).expect("same shape");
        x = y;
    }
    lambda.sqrt()
}

/// Binary sinogram of the rays that intersect the mask.
pub fn metal_trace(p: &Projector, mask: &Tensor) -> Result<Tensor> {
    Ok(p.forward_project(mask)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}
