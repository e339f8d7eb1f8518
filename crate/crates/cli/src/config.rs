//! JSON run configuration. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use ductms::dualdomain::SolverConfig;
use ductms::physics::{DoseLevel, FanBeamGeometry};
use ductms::pmsrnet::PmsrnetConfig;
use ductms::psatg::PromptConfig;
use ductms::training::dataset::{METAL_SIZES, N_LARGE};
use ductms::training::{DatasetConfig, LossConfig, TrainConfig, Variant};
use ductms::CoreError;
use serde::{Deserialize, Serialize};

pub const WORKSPACE_ENV: &str = "DUCTMS_WORKSPACE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    /// `desk`, `small` or `tiny`.
    pub preset: String,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection { preset: "desk".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoseSection {
    /// Dose labels assigned round-robin to samples (`half`, `quarter`, `eighth`).
    pub levels: Vec<String>,
}

impl Default for DoseSection {
    fn default() -> Self {
        DoseSection {
            levels: DoseLevel::ALL.iter().map(|d| d.label().to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Option<Variant>,
    pub network: PmsrnetConfig,
    pub prompt: PromptConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub milestones: Vec<f64>,
    pub batch_size: usize,
    pub shuffle: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub train_masks: usize,
    pub metal_sizes: Vec<usize>,
    pub n_large: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DatasetConfig::default();
        TrainSection {
            epochs: t.epochs,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            milestones: t.milestones,
            batch_size: t.batch_size,
            shuffle: t.shuffle,
            n_train: d.n_train,
            n_test: d.n_test,
            train_masks: d.train_masks,
            metal_sizes: METAL_SIZES.to_vec(),
            n_large: N_LARGE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Root that every relative path resolves against.
    pub workspace: PathBuf,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// PGM display window in HU: `[level, width]`.
    pub pgm_window: [f64; 2],
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            workspace: PathBuf::from("."),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            pgm_window: [0.0, 2000.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: GeometrySection,
    pub dose: DoseSection,
    pub model: ModelSection,
    pub solver: SolverConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            geometry: GeometrySection::default(),
            dose: DoseSection::default(),
            model: ModelSection::default(),
            solver: SolverConfig::default(),
            loss: LossConfig::default(),
            train: TrainSection::default(),
            io: IoSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config document.
    pub fn parse(text: &str) -> Result<Self, CoreError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CoreError::Config(format!("config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let g = self.geometry()?;
        self.doses()?;
        self.solver.validate()?;
        self.loss.validate()?;
        self.train_config().validate()?;
        self.dataset_config()?.validate(g.image_size)?;
        if !(self.io.pgm_window[1] > 0.0) {
            return Err(CoreError::Config("io.pgm_window width must be positive".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<FanBeamGeometry, CoreError> {
        FanBeamGeometry::preset(&self.geometry.preset)
    }

    pub fn doses(&self) -> Result<Vec<DoseLevel>, CoreError> {
        if self.dose.levels.is_empty() {
            return Err(CoreError::Config("dose.levels must not be empty".into()));
        }
        self.dose.levels.iter().map(|s| DoseLevel::parse(s)).collect()
    }

    pub fn variant(&self) -> Variant {
        self.model.variant.unwrap_or(Variant::Prompted)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            milestones: t.milestones.clone(),
            batch_size: t.batch_size,
            seed: self.seed,
            shuffle: t.shuffle,
        }
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig, CoreError> {
        let t = &self.train;
        Ok(DatasetConfig {
            n_train: t.n_train,
            n_test: t.n_test,
            doses: self.doses()?,
            metal_sizes: t.metal_sizes.clone(),
            n_large: t.n_large,
            train_masks: t.train_masks,
            seed: self.seed,
        })
    }

    /// Workspace root: `$DUCTMS_WORKSPACE` if set, else `io.workspace`.
    pub fn workspace(&self) -> PathBuf {
        match std::env::var_os(WORKSPACE_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.io.workspace.clone(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workspace().join(p)
        }
    }
}
