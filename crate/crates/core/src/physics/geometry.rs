use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Equiangular fan-beam scanner with a square image grid centred on the
/// rotation axis. Views are uniform over a full turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanBeamGeometry {
    pub n_views: usize,
    pub n_detectors: usize,
    /// mm
    pub source_to_center: f64,
    /// mm
    pub source_to_detector: f64,
    /// Angular pitch of the detector arc, radians.
    pub detector_spacing: f64,
    pub image_size: usize,
    /// mm
    pub pixel_spacing: f64,
}

/// Full width of the reconstructed field for every preset, mm.
pub const FOV_MM: f64 = 256.0;

impl FanBeamGeometry {
    /// Builds a geometry whose fan just covers the circle circumscribing
    /// the image (with a 5% margin).
    pub fn covering(image_size: usize, n_views: usize, n_detectors: usize) -> Self {
        let pixel_spacing = FOV_MM / image_size as f64;
        let source_to_center = 600.0;
        let r = 0.5 * FOV_MM * std::f64::consts::SQRT_2;
        let half_fan = (1.05 * r / source_to_center).asin();
        FanBeamGeometry {
            n_views,
            n_detectors,
            source_to_center,
            source_to_detector: 1100.0,
            detector_spacing: 2.0 * half_fan / n_detectors as f64,
            image_size,
            pixel_spacing,
        }
    }

    /// 64×64 image, 96 views × 96 detectors.
    pub fn desk() -> Self {
        Self::covering(64, 96, 96)
    }

    /// 16×16 image, 24 × 24 sinogram.
    pub fn small() -> Self {
        Self::covering(16, 24, 24)
    }

    /// 8×8 image, 12 × 16 sinogram; small enough for dense-matrix oracles.
    pub fn tiny() -> Self {
        Self::covering(8, 12, 16)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(CoreError::Config(format!("unknown geometry preset '{}'", name))),
        }
    }

    pub const PRESETS: [&'static str; 3] = ["desk", "small", "tiny"];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Geometry(m.to_string()));
        if self.n_views == 0 || self.n_detectors == 0 || self.image_size == 0 {
            return bad("counts must be at least 1");
        }
        if !(self.pixel_spacing > 0.0 && self.detector_spacing > 0.0) {
            return bad("spacings must be positive");
        }
        if !(self.source_to_detector >= self.source_to_center) {
            return bad("detector must lie beyond the rotation centre");
        }
        if !(self.source_to_center > self.fov_radius()) {
            return bad("source must lie outside the field of view");
        }
        if self.detector_spacing * self.n_detectors as f64 >= PI {
            return bad("fan angle must be below π");
        }
        Ok(())
    }

    pub fn view_angle(&self, v: usize) -> f64 {
        2.0 * PI * v as f64 / self.n_views as f64
    }

    pub fn view_angles(&self) -> Vec<f64> {
        (0..self.n_views).map(|v| self.view_angle(v)).collect()
    }

    /// Fan angle of detector `j`, zero on the central ray.
    pub fn detector_angle(&self, j: usize) -> f64 {
        (j as f64 - 0.5 * (self.n_detectors as f64 - 1.0)) * self.detector_spacing
    }

    /// Radius of the circle circumscribing the image grid, mm.
    pub fn fov_radius(&self) -> f64 {
        0.5 * self.image_size as f64 * self.pixel_spacing * std::f64::consts::SQRT_2
    }

    pub fn image_shape(&self) -> [usize; 2] {
        [self.image_size, self.image_size]
    }

    pub fn sino_shape(&self) -> [usize; 2] {
        [self.n_views, self.n_detectors]
    }

    pub fn n_pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn n_rays(&self) -> usize {
        self.n_views * self.n_detectors
    }

    /// Source position for view `v`.
    pub fn source(&self, v: usize) -> [f64; 2] {
        let b = self.view_angle(v);
        [self.source_to_center * b.cos(), self.source_to_center * b.sin()]
    }

    /// Unit direction of ray (v, j): the central direction (source towards
    /// the origin) rotated counter-clockwise by the fan angle.
    pub fn ray_direction(&self, v: usize, j: usize) -> [f64; 2] {
        let b = self.view_angle(v);
        let (c0, c1) = (-b.cos(), -b.sin());
        let (sg, cg) = self.detector_angle(j).sin_cos();
        [c0 * cg - c1 * sg, c0 * sg + c1 * cg]
    }

    /// Physical centre of pixel (row, col), mm. Rows run top to bottom.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let h = 0.5 * self.image_size as f64;
        [
            (col as f64 + 0.5 - h) * self.pixel_spacing,
            (h - row as f64 - 0.5) * self.pixel_spacing,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in FanBeamGeometry::PRESETS {
            FanBeamGeometry::preset(p).unwrap().validate().unwrap();
        }
        let g = FanBeamGeometry::desk();
        assert_eq!((g.image_size, g.n_views, g.n_detectors), (64, 96, 96));
    }

    #[test]
    fn fan_covers_field_of_view() {
        let g = FanBeamGeometry::desk();
        let edge = g.detector_angle(g.n_detectors - 1) + 0.5 * g.detector_spacing;
        assert!(g.source_to_center * edge.sin() > g.fov_radius());
    }

    #[test]
    fn central_ray_points_at_origin() {
        let g = FanBeamGeometry::covering(8, 4, 5);
        for v in 0..4 {
            let s = g.source(v);
            let d = g.ray_direction(v, 2);
            let cross = s[0] * d[1] - s[1] * d[0];
            assert!(cross.abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_degenerate() {
        let mut g = FanBeamGeometry::desk();
        g.n_views = 0;
        assert!(g.validate().is_err());
        let mut g = FanBeamGeometry::desk();
        g.source_to_center = 10.0;
        assert!(g.validate().is_err());
    }
}
