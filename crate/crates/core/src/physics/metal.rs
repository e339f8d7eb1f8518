use tensor::Tensor;

use crate::error::{CoreError, Result};

/// Binary implant mask on the image grid plus its attenuation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetalSpec {
    pub mask: Tensor,
    /// mm⁻¹
    pub mu_metal: f64,
}

impl MetalSpec {
    pub fn new(mask: Tensor, mu_metal: f64) -> Result<Self> {
        if mask.ndim() != 2 || mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CoreError::Usage("metal mask must be a binary 2-D array".into()));
        }
        Ok(MetalSpec { mask, mu_metal })
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Replaces masked pixels with the metal attenuation.
pub fn insert_metal(img: &Tensor, m: &MetalSpec) -> Result<Tensor> {
    if img.shape() != m.mask.shape() {
        return Err(CoreError::Geometry(format!(
            "mask {:?} does not match image {:?}",
            m.mask.shape(),
            img.shape()
        )));
    }
    if m.pixel_count() == 0 {
        log::warn!("insert_metal called with an empty mask; image returned unchanged");
    }
    Ok(img.zip_map(&m.mask, |v, k| if k != 0.0 { m.mu_metal } else { v })?)
}

/// Elliptical blob of exactly `count` pixels: the pixels nearest (in the
/// ellipse metric) to `center = (row, col)`, ties broken by raster order.
/// `aspect` is the minor/major axis ratio; `angle` rotates the major axis.
pub fn ellipse_mask(size: usize, center: (f64, f64), aspect: f64, angle: f64, count: usize) -> Result<Tensor> {
    if count > size * size {
        return Err(CoreError::Usage(format!("{} pixels do not fit a {}² grid", count, size)));
    }
    if !(aspect > 0.0 && aspect <= 1.0) {
        return Err(CoreError::Usage(format!("aspect must lie in (0, 1], got {}", aspect)));
    }
    let (sa, ca) = angle.sin_cos();
    let mut order: Vec<(f64, usize)> = (0..size * size)
        .map(|i| {
            let (dr, dc) = ((i / size) as f64 - center.0, (i % size) as f64 - center.1);
            let u = dc * ca + dr * sa;
            let v = (-dc * sa + dr * ca) / aspect;
            (u * u + v * v, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut mask = Tensor::zeros(vec![size, size]);
    for &(_, i) in &order[..count] {
        mask.data_mut()[i] = 1.0;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_counts() {
        for n in [0, 1, 3, 49, 118] {
            let m = ellipse_mask(64, (30.3, 20.7), 0.6, 0.4, n).unwrap();
            assert_eq!(m.sum() as usize, n);
        }
    }

    #[test]
    fn non_binary_mask_rejected() {
        assert!(MetalSpec::new(Tensor::full(vec![2, 2], 0.5), 0.2).is_err());
    }
}
