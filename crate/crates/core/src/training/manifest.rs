//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<split>/<id>/{x,s,y,metal}.{json,f64}   reference, clean sino, measured sino, implant
//! <dir>/<split>/<id>/x.pgm                       preview
//! ```
//!
//! The manifest records the geometry, the dose table (photons and dose-map
//! value per label) and one entry per sample. It contains no timestamps or
//! absolute paths, so identical configs give byte-identical files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::{read_array, write_array, write_pgm, Units};
use crate::physics::{to_hu, DoseLevel, FanBeamGeometry};
use crate::training::dataset::{Dataset, DatasetConfig, MetalBin, Sample, Split};

pub const MANIFEST_FORMAT: &str = "ductms-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseEntry {
    pub label: DoseLevel,
    pub photons: f64,
    pub dose_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub dose: DoseLevel,
    pub seed: u64,
    pub mask_id: usize,
    pub bin: MetalBin,
    pub metal_pixels: usize,
}

impl SampleEntry {
    /// Directory of the sample relative to the dataset root.
    pub fn rel_dir(&self) -> PathBuf {
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        Path::new(split).join(&self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub geometry: FanBeamGeometry,
    pub dataset: DatasetConfig,
    pub doses: Vec<DoseEntry>,
    /// SHA-256 over all sample arrays.
    pub hash: String,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn new(ds: &Dataset, geometry: &FanBeamGeometry) -> Self {
        let mut doses: Vec<DoseLevel> = ds.config.doses.clone();
        doses.sort();
        doses.dedup();
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            geometry: geometry.clone(),
            dataset: ds.config.clone(),
            doses: doses
                .into_iter()
                .map(|d| DoseEntry {
                    label: d,
                    photons: d.photons(),
                    dose_map: d.reciprocal(),
                })
                .collect(),
            hash: ds.hash(),
            samples: ds
                .train
                .iter()
                .chain(&ds.test)
                .map(|s| SampleEntry {
                    id: s.id.clone(),
                    split: s.split,
                    dose: s.dose,
                    seed: s.seed,
                    mask_id: s.mask_id,
                    bin: s.bin,
                    metal_pixels: s.metal_pixels(),
                })
                .collect(),
        }
    }

    /// Parses and checks a manifest document.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(bytes).map_err(|e| CoreError::Format(format!("manifest: {}", e)))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(CoreError::Format(format!(
                "unsupported dataset format '{}' v{}",
                m.format, m.version
            )));
        }
        m.geometry.validate()?;
        for e in &m.doses {
            if e.photons != e.label.photons() || e.dose_map != e.label.reciprocal() {
                return Err(CoreError::Format(format!("dose table entry for '{}' is inconsistent", e.label)));
            }
        }
        let mut ids: Vec<&str> = m.samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::Format("duplicate sample ids".into()));
        }
        for s in &m.samples {
            if s.id.is_empty() || !s.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(CoreError::Format(format!("invalid sample id '{}'", s.id)));
            }
            if !m.doses.iter().any(|d| d.label == s.dose) {
                return Err(CoreError::Format(format!("sample {} uses dose '{}' absent from the dose table", s.id, s.dose)));
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }
}

/// Writes every sample and the manifest under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset, geometry: &FanBeamGeometry, pgm_window: [f64; 2]) -> Result<Manifest> {
    let manifest = Manifest::new(ds, geometry);
    for (entry, s) in manifest.samples.iter().zip(ds.train.iter().chain(&ds.test)) {
        let d = dir.join(entry.rel_dir());
        std::fs::create_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
        write_array(d.join("x"), &s.x, Units::Attenuation)?;
        write_array(d.join("s"), &s.s, Units::LineIntegral)?;
        write_array(d.join("y"), &s.y, Units::LineIntegral)?;
        write_array(d.join("metal"), &s.metal, Units::Mask)?;
        write_pgm(d.join("x.pgm"), &to_hu(&s.x), pgm_window[0], pgm_window[1])?;
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    Manifest::parse(&bytes)
}

fn expect_units(path: &Path, got: Units, want: Units) -> Result<()> {
    if got != want {
        return Err(CoreError::Format(format!("{} holds {:?} data, expected {:?}", path.display(), got, want)));
    }
    Ok(())
}

/// Loads one sample's arrays.
pub fn read_sample(dir: &Path, e: &SampleEntry, geometry: &FanBeamGeometry) -> Result<Sample> {
    let d = dir.join(e.rel_dir());
    let load = |name: &str, units: Units, shape: [usize; 2]| -> Result<tensor::Tensor> {
        let p = d.join(name);
        let (t, u) = read_array(&p)?;
        expect_units(&p, u, units)?;
        if t.shape() != shape {
            return Err(CoreError::Format(format!("{} has shape {:?}, expected {:?}", p.display(), t.shape(), shape)));
        }
        Ok(t)
    };
    let (img, sino) = (geometry.image_shape(), geometry.sino_shape());
    let metal = load("metal", Units::Mask, img)?;
    Ok(Sample {
        id: e.id.clone(),
        split: e.split,
        seed: e.seed,
        dose: e.dose,
        mask_id: e.mask_id,
        bin: e.bin,
        x: load("x", Units::Attenuation, img)?,
        s: load("s", Units::LineIntegral, sino)?,
        y: load("y", Units::LineIntegral, sino)?,
        non_metal: metal.map(|v| 1.0 - v),
        metal,
    })
}

/// Loads all samples of `split`.
pub fn read_split(dir: &Path, m: &Manifest, split: Split) -> Result<Vec<Sample>> {
    m.samples
        .iter()
        .filter(|e| e.split == split)
        .map(|e| read_sample(dir, e, &m.geometry))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::Projector;
    use crate::training::dataset::make_dataset;

    fn tiny_dataset() -> (Dataset, FanBeamGeometry) {
        let g = FanBeamGeometry::small();
        let p = Projector::new(&g).unwrap();
        let cfg = DatasetConfig {
            n_train: 3,
            n_test: 2,
            metal_sizes: vec![3, 1],
            n_large: 1,
            train_masks: 2,
            ..Default::default()
        };
        (make_dataset(&p, &cfg).unwrap(), g)
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let (ds, g) = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &ds, &g, [0.0, 2000.0]).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(read_split(dir.path(), &back, Split::Train).unwrap(), ds.train);
        assert_eq!(read_split(dir.path(), &back, Split::Test).unwrap(), ds.test);
    }

    #[test]
    fn manifest_rejects_tampering() {
        let (ds, g) = tiny_dataset();
        let m = Manifest::new(&ds, &g);
        assert!(Manifest::parse(m.to_json().as_bytes()).is_ok());
        let mut bad = m.clone();
        bad.doses[0].photons = 1.0;
        assert!(Manifest::parse(bad.to_json().as_bytes()).is_err());
        let mut bad = m.clone();
        bad.samples[0].id = "../escape".into();
        assert!(Manifest::parse(bad.to_json().as_bytes()).is_err());
        let mut bad = m;
        bad.samples[1].id = bad.samples[0].id.clone();
        assert!(Manifest::parse(bad.to_json().as_bytes()).is_err());
        assert!(Manifest::parse(b"{").is_err());
    }
}
