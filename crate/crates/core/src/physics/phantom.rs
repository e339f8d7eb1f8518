//! Ellipse phantoms in attenuation units (mm⁻¹).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor::Tensor;

/// Linear attenuation of water, mm⁻¹.
pub const MU_WATER: f64 = 0.0192;
/// Default implant attenuation, mm⁻¹.
pub const MU_METAL: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Modified Shepp-Logan head, intensities scaled to 0.04 mm⁻¹ skull.
    SheppLogan,
    /// Body ellipse with soft-tissue organs and bone inserts.
    Random,
}

/// `(centre x, centre y, semi-axis a, semi-axis b, angle, value)` in
/// normalised coordinates `[-1, 1]²` (x right, y up).
#[derive(Clone, Copy, Debug)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Rasterises ellipses additively, 2×2 supersampled per pixel.
pub fn rasterize(size: usize, ellipses: &[Ellipse]) -> Tensor {
    let mut img = Tensor::zeros(vec![size, size]);
    let h = size as f64 / 2.0;
    for r in 0..size {
        for c in 0..size {
            let mut acc = 0.0;
            for (sr, sc) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let x = (c as f64 + sc - h) / h;
                let y = (h - r as f64 - sr) / h;
                acc += ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.value).sum::<f64>();
            }
            img.data_mut()[r * size + c] = 0.25 * acc;
        }
    }
    img
}

fn shepp_logan() -> Vec<Ellipse> {
    let d = std::f64::consts::PI / 180.0;
    let s = 0.04;
    [
        (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
        (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
        (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
        (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
        (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
        (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
        (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
        (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
        (0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
        (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
    ]
    .iter()
    .map(|&(cx, cy, a, b, ang, v)| Ellipse {
        cx,
        cy,
        a,
        b,
        angle: ang * d,
        value: v * s,
    })
    .collect()
}

fn random_body(rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let mut e = Vec::new();
    let body = Ellipse {
        cx: rng.random_range(-0.03..0.03),
        cy: rng.random_range(-0.03..0.03),
        a: rng.random_range(0.72..0.88),
        b: rng.random_range(0.55..0.72),
        angle: rng.random_range(-0.15..0.15),
        value: rng.random_range(0.017..0.022),
    };
    e.push(body);
    let inside = |rng: &mut ChaCha8Rng, margin: f64| {
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let rho = rng.random_range(0.0..(1.0 - margin)).sqrt() * (1.0 - margin);
        (body.cx + rho * body.a * t.cos(), body.cy + rho * body.b * t.sin())
    };
    for _ in 0..rng.random_range(3..7) {
        let (cx, cy) = inside(rng, 0.35);
        e.push(Ellipse {
            cx,
            cy,
            a: rng.random_range(0.06..0.2),
            b: rng.random_range(0.05..0.16),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            value: rng.random_range(-0.004..0.004),
        });
    }
    for _ in 0..rng.random_range(1..4) {
        let (cx, cy) = inside(rng, 0.25);
        e.push(Ellipse {
            cx,
            cy,
            a: rng.random_range(0.03..0.08),
            b: rng.random_range(0.03..0.07),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            value: rng.random_range(0.015..0.028),
        });
    }
    e
}

/// Deterministic phantom of the given kind; values lie in `[0, 0.05]`.
pub fn make_phantom(kind: PhantomKind, size: usize, seed: u64) -> Tensor {
    let ellipses = match kind {
        PhantomKind::SheppLogan => shepp_logan(),
        PhantomKind::Random => random_body(&mut ChaCha8Rng::seed_from_u64(seed)),
    };
    rasterize(size, &ellipses).map(|v| v.clamp(0.0, 0.05))
}

/// Uniform disk of the given radius (in pixels) centred on the grid.
pub fn disk_phantom(size: usize, radius_px: f64, mu: f64) -> Tensor {
    let r = radius_px / (size as f64 / 2.0);
    rasterize(
        size,
        &[Ellipse {
            cx: 0.0,
            cy: 0.0,
            a: r,
            b: r,
            angle: 0.0,
            value: mu,
        }],
    )
}

/// HU view: `1000 (μ − μ_w) / μ_w`.
pub fn to_hu(mu: &Tensor) -> Tensor {
    mu.map(|v| 1000.0 * (v - MU_WATER) / MU_WATER)
}

pub fn from_hu(hu: &Tensor) -> Tensor {
    hu.map(|v| MU_WATER * (1.0 + v / 1000.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_phantom_is_deterministic_and_in_range() {
        let a = make_phantom(PhantomKind::Random, 64, 11);
        assert_eq!(a, make_phantom(PhantomKind::Random, 64, 11));
        assert_ne!(a, make_phantom(PhantomKind::Random, 64, 12));
        assert!(a.min() >= 0.0 && a.max() <= 0.05);
        assert!(a.max() > 0.03, "bone present");
    }

    #[test]
    fn hu_round_trip() {
        let a = make_phantom(PhantomKind::SheppLogan, 16, 0);
        let b = from_hu(&to_hu(&a));
        assert!(a.sub(&b).unwrap().max_abs() < 1e-15);
        assert_eq!(to_hu(&Tensor::scalar(MU_WATER)).item().unwrap(), 0.0);
    }
}
