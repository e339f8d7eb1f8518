//! Synthetic paired dataset: random body phantoms, elliptical implants and
//! Poisson-degraded sinograms at the configured doses.
//!
//! Every sample draws its own seed from the master seed by splitmix, so
//! generation order does not matter and identical configs give identical
//! data. Test samples use a fixed set of implant masks, one per entry of
//! `metal_sizes`; training masks come from a separate pool that never
//! repeats a test mask.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::physics::{degrade_low_dose, ellipse_mask, insert_metal, make_phantom, DoseLevel, MetalSpec, PhantomKind, Projector, MU_METAL};

/// Implant sizes in pixels at 64×64, largest first.
pub const METAL_SIZES: [usize; 10] = [49, 21, 21, 11, 6, 3, 3, 3, 1, 1];

/// The first four sizes form the "large" bin.
pub const N_LARGE: usize = 4;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of item `index` in stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_TRAIN_MASK: u64 = 3;
const STREAM_TEST_MASK: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetalBin {
    Large,
    Small,
}

impl MetalBin {
    pub const ALL: [MetalBin; 2] = [MetalBin::Large, MetalBin::Small];

    pub fn label(self) -> &'static str {
        match self {
            MetalBin::Large => "large",
            MetalBin::Small => "small",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Doses assigned round-robin over samples.
    pub doses: Vec<DoseLevel>,
    /// Pixel counts of the test implants; the first `n_large` are "large".
    pub metal_sizes: Vec<usize>,
    pub n_large: usize,
    /// Number of distinct training implant masks.
    pub train_masks: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 160,
            n_test: 40,
            doses: DoseLevel::ALL.to_vec(),
            metal_sizes: METAL_SIZES.to_vec(),
            n_large: N_LARGE,
            train_masks: 40,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(CoreError::Config("dataset needs at least one training and one test sample".into()));
        }
        if self.doses.is_empty() {
            return Err(CoreError::Config("dataset.doses must not be empty".into()));
        }
        if self.metal_sizes.is_empty() || self.train_masks == 0 {
            return Err(CoreError::Config("dataset needs metal sizes and training masks".into()));
        }
        if self.n_large > self.metal_sizes.len() {
            return Err(CoreError::Config("dataset.n_large exceeds the number of metal sizes".into()));
        }
        let cap = image_size * image_size / 16;
        if let Some(&s) = self.metal_sizes.iter().find(|&&s| s == 0 || s > cap) {
            return Err(CoreError::Config(format!("metal size {} outside 1..={} for {}² images", s, cap, image_size)));
        }
        Ok(())
    }

    pub fn bin_of(&self, size_index: usize) -> MetalBin {
        if size_index < self.n_large {
            MetalBin::Large
        } else {
            MetalBin::Small
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub dose: DoseLevel,
    /// Index into the split's mask list.
    pub mask_id: usize,
    pub bin: MetalBin,
    /// Metal-free reference image, `[H, W]`.
    pub x: Tensor,
    /// Clean sinogram of `x`, `[V, D]`.
    pub s: Tensor,
    /// Measured sinogram (implant + Poisson noise), `[V, D]`.
    pub y: Tensor,
    /// Implant mask.
    pub metal: Tensor,
    /// `1 − metal`.
    pub non_metal: Tensor,
}

impl Sample {
    pub fn metal_pixels(&self) -> usize {
        self.metal.data().iter().filter(|&&v| v != 0.0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskEntry {
    pub mask: Tensor,
    pub bin: MetalBin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub train_masks: Vec<MaskEntry>,
    pub test_masks: Vec<MaskEntry>,
}

fn random_mask(size: usize, pixels: usize, seed: u64) -> Result<Tensor> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let c = size as f64 / 2.0;
    let t = r.random_range(0.0..std::f64::consts::TAU);
    let rho = r.random_range(0.0f64..1.0).sqrt();
    let center = (c + 0.3 * c * rho * t.sin(), c + 0.45 * c * rho * t.cos());
    ellipse_mask(size, center, r.random_range(0.4..1.0), r.random_range(0.0..std::f64::consts::PI), pixels)
}

/// Test masks (one per configured size) and the disjoint training pool.
pub fn make_masks(cfg: &DatasetConfig, size: usize) -> Result<(Vec<MaskEntry>, Vec<MaskEntry>)> {
    let scale = (size * size) as f64 / 4096.0;
    let px = |s: usize| ((s as f64 * scale).round() as usize).max(1);
    let test: Vec<MaskEntry> = cfg
        .metal_sizes
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            Ok(MaskEntry {
                mask: random_mask(size, px(s), derive_seed(cfg.seed, STREAM_TEST_MASK, k as u64))?,
                bin: cfg.bin_of(k),
            })
        })
        .collect::<Result<_>>()?;
    let mut train = Vec::with_capacity(cfg.train_masks);
    let mut attempt = 0u64;
    while train.len() < cfg.train_masks {
        let k = train.len() % cfg.metal_sizes.len();
        let m = random_mask(size, px(cfg.metal_sizes[k]), derive_seed(cfg.seed, STREAM_TRAIN_MASK, attempt))?;
        attempt += 1;
        if attempt > 1000 * cfg.train_masks as u64 {
            return Err(CoreError::Config("could not draw enough distinct training masks".into()));
        }
        if test.iter().any(|t| t.mask == m) {
            continue;
        }
        train.push(MaskEntry { mask: m, bin: cfg.bin_of(k) });
    }
    Ok((train, test))
}

fn make_sample(
    proj: &Projector,
    split: Split,
    index: usize,
    seed: u64,
    dose: DoseLevel,
    mask_id: usize,
    entry: &MaskEntry,
) -> Result<Sample> {
    let size = proj.geometry().image_size;
    let x = make_phantom(PhantomKind::Random, size, seed);
    let with_metal = insert_metal(&x, &MetalSpec::new(entry.mask.clone(), MU_METAL)?)?;
    let s = proj.forward_project(&x)?;
    let y = degrade_low_dose(&proj.forward_project(&with_metal)?, Some(dose.photons()), splitmix64(seed))?;
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    Ok(Sample {
        id: format!("{}_{:04}", tag, index),
        split,
        seed,
        dose,
        mask_id,
        bin: entry.bin,
        non_metal: entry.mask.map(|v| 1.0 - v),
        metal: entry.mask.clone(),
        x,
        s,
        y,
    })
}

pub fn make_dataset(proj: &Projector, cfg: &DatasetConfig) -> Result<Dataset> {
    let size = proj.geometry().image_size;
    cfg.validate(size)?;
    let (train_masks, test_masks) = make_masks(cfg, size)?;
    let build = |split: Split, n: usize, stream: u64, masks: &[MaskEntry]| -> Result<Vec<Sample>> {
        (0..n)
            .map(|i| {
                let k = i % masks.len();
                let d = cfg.doses[i % cfg.doses.len()];
                make_sample(proj, split, i, derive_seed(cfg.seed, stream, i as u64), d, k, &masks[k])
            })
            .collect()
    };
    Ok(Dataset {
        train: build(Split::Train, cfg.n_train, STREAM_TRAIN, &train_masks)?,
        test: build(Split::Test, cfg.n_test, STREAM_TEST, &test_masks)?,
        config: cfg.clone(),
        train_masks,
        test_masks,
    })
}

impl Dataset {
    /// SHA-256 over every array of every sample, in order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in self.train.iter().chain(&self.test) {
            h.update(s.id.as_bytes());
            h.update(s.dose.label().as_bytes());
            for t in [&s.x, &s.s, &s.y, &s.metal] {
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    /// Samples of one dose, for per-dose training.
    pub fn filter_dose(&self, dose: DoseLevel) -> Dataset {
        Dataset {
            train: self.train.iter().filter(|s| s.dose == dose).cloned().collect(),
            test: self.test.iter().filter(|s| s.dose == dose).cloned().collect(),
            config: DatasetConfig {
                doses: vec![dose],
                ..self.config.clone()
            },
            train_masks: self.train_masks.clone(),
            test_masks: self.test_masks.clone(),
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}
