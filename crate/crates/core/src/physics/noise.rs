use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use tensor::Tensor;

use crate::error::{CoreError, Result};

/// Reduced-dose acquisition settings, by incident photons per ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoseLevel {
    Half,
    Quarter,
    Eighth,
}

impl DoseLevel {
    pub const ALL: [DoseLevel; 3] = [DoseLevel::Half, DoseLevel::Quarter, DoseLevel::Eighth];

    /// Incident photon count N₀.
    pub fn photons(self) -> f64 {
        match self {
            DoseLevel::Half => 1e5,
            DoseLevel::Quarter => 5e4,
            DoseLevel::Eighth => 2.5e4,
        }
    }

    /// Reciprocal of the dose fraction; the value of the dose-map prompt.
    pub fn reciprocal(self) -> f64 {
        match self {
            DoseLevel::Half => 2.0,
            DoseLevel::Quarter => 4.0,
            DoseLevel::Eighth => 8.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DoseLevel::Half => "half",
            DoseLevel::Quarter => "quarter",
            DoseLevel::Eighth => "eighth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "half" | "1/2" => Ok(DoseLevel::Half),
            "quarter" | "1/4" => Ok(DoseLevel::Quarter),
            "eighth" | "1/8" => Ok(DoseLevel::Eighth),
            _ => Err(CoreError::Config(format!(
                "unknown dose level '{}' (expected half, quarter or eighth)",
                s
            ))),
        }
    }
}

impl std::fmt::Display for DoseLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Simulates transmitted counts `N ~ Poisson(N₀ e^{−s})` per ray and returns
/// the measured line integrals `−ln(max(N, 1) / N₀)`. `photons = None` is the
/// noiseless limit and returns the input unchanged.
pub fn degrade_low_dose(sino: &Tensor, photons: Option<f64>, seed: u64) -> Result<Tensor> {
    sino.ensure_finite("degrade_low_dose")?;
    let Some(n0) = photons else {
        return Ok(sino.clone());
    };
    if !(n0 > 0.0 && n0.is_finite()) {
        return Err(CoreError::Config(format!("photon count must be positive, got {}", n0)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sino.clone();
    for v in out.data_mut() {
        let lambda = n0 * (-*v).exp();
        let counts = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| CoreError::Numeric(format!("poisson rate {}: {}", lambda, e)))?
                .sample(&mut rng)
        } else {
            0.0
        };
        *v = -(counts.max(1.0) / n0).ln();
    }
    Ok(out)
}
